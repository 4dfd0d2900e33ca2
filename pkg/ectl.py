import argparse
import asyncio
import os
import sys
import traceback

from typing import Optional

import aiofiles

import config
import modules.utils
from modules.errors import ConfigError, ECTLError
from modules.paillier import dump_keys, keygen
from modules.scenario import RunConfig, load_run_config
from modules.simloop import ControllerNode, EncryptedLink, TrajectoryRecord, drive, prepare_plant, run_encrypted
from modules.transport import StreamTransport

logger = modules.utils.get_logger()

CONNECT_ATTEMPTS = 50
CONNECT_RETRY_DELAY = 0.1


async def write_file(path: str, text: str):
    directory = os.path.dirname(path)
    if directory:
        os.makedirs(directory, exist_ok=True)
    async with aiofiles.open(path, "w", newline="") as f:
        await f.write(text)


async def write_outputs(run_config: RunConfig, record: TrajectoryRecord):
    if run_config.trajectory_path:
        await write_file(run_config.trajectory_path, record.to_csv(run_config.record_timing))
        logger.info(f"Trajectory written to {run_config.trajectory_path}")
    if run_config.metrics_path:
        await write_file(run_config.metrics_path, record.metrics(run_config.record_timing))


def execute(coro) -> int:
    """Run a command coroutine and turn module errors into exit codes."""
    try:
        return asyncio.run(coro) or 0
    except ConfigError as e:
        logger.error(f"ConfigError: {e}")
        print(f"ConfigError: {e}", file=sys.stderr)
        return 2
    except ECTLError as e:
        name = type(e).__name__
        logger.error(f"{name}: {e}")
        logger.debug(traceback.format_exc())
        print(f"{name}: {e}", file=sys.stderr)
        return 1
    except Exception:
        logger.error(f"Unexpected error:\n{traceback.format_exc()}")
        return 1


async def run_scenario(config_path: str) -> int:
    run_config = await load_run_config(config_path)
    record = await run_encrypted(run_config.scenario)
    await write_outputs(run_config, record)
    return 0


async def run_plant(config_path: str, address: str) -> int:
    run_config = await load_run_config(config_path)
    host, port = modules.utils.parse_address(address)
    plant = prepare_plant(run_config.scenario)

    for attempt in range(CONNECT_ATTEMPTS):
        try:
            reader, writer = await asyncio.open_connection(host, port)
            break
        except OSError:
            if attempt == CONNECT_ATTEMPTS - 1:
                raise
            await asyncio.sleep(CONNECT_RETRY_DELAY)

    logger.info(f"Plant connected to controller at {host}:{port}")
    link = EncryptedLink(plant, StreamTransport(reader, writer))
    record = await drive(run_config.scenario, link, plant.public.n.bit_length())
    await write_outputs(run_config, record)
    return 0


async def run_controller(address: str, idle_timeout: float = config.CONTROLLER_IDLE_TIMEOUT) -> int:
    host, port = modules.utils.parse_address(address)
    connected = asyncio.Queue()
    server = await asyncio.start_server(lambda r, w: connected.put_nowait((r, w)), host, port)
    logger.info(f"Controller listening on {host}:{port}")

    try:
        try:
            reader, writer = await asyncio.wait_for(connected.get(), timeout=idle_timeout)
        except asyncio.TimeoutError:
            logger.info(f"No plant connected within {idle_timeout}s, shutting down")
            return 0
        # one plant per controller
        server.close()
        await ControllerNode().serve(StreamTransport(reader, writer))
    finally:
        server.close()
        await server.wait_closed()

    return 0


async def write_keys(bits: int, seed: int, out_path: str, config_path: Optional[str] = None) -> int:
    if bits < config.MIN_CLI_KEY_BITS:
        raise ConfigError(f"Key length must be at least {config.MIN_CLI_KEY_BITS} bits, got {bits}")

    public, private = keygen(bits, seed)
    await write_file(out_path, dump_keys(private))
    logger.info(f"Wrote {public.n.bit_length()}-bit key pair to {out_path}")

    if config_path:
        n_min = (await load_run_config(config_path)).scenario.design.N_min
        verdict = "clears" if public.n > n_min else "does NOT clear"
        print(f"N {verdict} the key bound N_min={n_min} of {config_path}")

    return 0


def cmd_run(config_path: str) -> int:
    return execute(run_scenario(config_path))


def cmd_plant(config_path: str, connect_addr: str) -> int:
    return execute(run_plant(config_path, connect_addr))


def cmd_controller(listen_addr: str) -> int:
    return execute(run_controller(listen_addr))


def cmd_keygen(bits: int, seed: int, out_path: str, config_path: Optional[str] = None) -> int:
    return execute(write_keys(bits, seed, out_path, config_path))


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ectl", description="Encrypted networked control simulator")
    commands = parser.add_subparsers(dest="command", required=True)

    run = commands.add_parser("run", help="Run a scenario with both nodes in this process")
    run.add_argument("--config", required=True)

    plant = commands.add_parser("plant", help="Run the plant node against a remote controller")
    plant.add_argument("--config", required=True)
    plant.add_argument("--connect", default=config.DEFAULT_LISTEN)

    controller = commands.add_parser("controller", help="Serve one plant over TCP")
    controller.add_argument("--listen", default=config.DEFAULT_LISTEN)

    keys = commands.add_parser("keygen", help="Generate and save a Paillier key pair")
    keys.add_argument("--bits", type=int, required=True)
    keys.add_argument("--seed", type=int, default=0)
    keys.add_argument("--out", required=True)
    keys.add_argument("--config", help="Check the key against this scenario's key bound")

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.command == "run":
        return cmd_run(args.config)
    if args.command == "plant":
        return cmd_plant(args.config, args.connect)
    if args.command == "controller":
        return cmd_controller(args.listen)
    return cmd_keygen(args.bits, args.seed, args.out, args.config)


if __name__ == "__main__":
    sys.exit(main())
