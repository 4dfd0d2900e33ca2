from __future__ import annotations

import configparser
import io
import math
import random

from dataclasses import dataclass, field
from typing import Sequence, Tuple

import config
from modules.errors import (
    CiphertextOutOfRange,
    LengthMismatch,
    MessageOutOfRange,
    NotDivisible,
    PrimeSearchExhausted,
    ScalarOutOfRange,
)
from modules.utils import get_logger

logger = get_logger()

SMALL_PRIMES = (2, 3, 5, 7, 11, 13, 17, 19, 23, 29, 31, 37, 41, 43, 47)


@dataclass(frozen=True)
class PublicKey:
    """
    Paillier public key.

    Attributes
    ----------------
    n: :class:`int`
        The modulus N = pq.
    g: :class:`int`
        Generator in Z*_{N²}, N + 1 for generated keys.
    n_squared: :class:`int`
        Cached N².
    """

    n: int
    g: int
    n_squared: int = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "n_squared", self.n * self.n)
        if self.n < 15:
            raise ValueError(f"Modulus {self.n} is smaller than the smallest valid key")
        if not 0 < self.g < self.n_squared or math.gcd(self.g, self.n_squared) != 1:
            raise ValueError("Generator must be a unit modulo N²")


@dataclass(frozen=True)
class PrivateKey:
    lam: int
    mu: int
    public: PublicKey = field(repr=False)


@dataclass(frozen=True)
class Ciphertext:
    value: int


@dataclass(frozen=True)
class BlindingKey:
    """
    Secret multiplier used to hide the gain from the controller.

    Attributes
    ----------------
    r: :class:`int`
        The multiplier, 1 <= r < r_max.
    r_max: :class:`int`
        Exclusive sampling bound, it feeds the key-size bound.
    """

    r: int
    r_max: int

    def __post_init__(self):
        if not 1 <= self.r < self.r_max:
            raise ValueError(f"Blinding integer {self.r} is outside [1, {self.r_max})")

    @classmethod
    def sample(cls, rng: random.Random, r_max: int) -> BlindingKey:
        return cls(r=rng.randrange(1, r_max), r_max=r_max)


def derive_rng(seed: int, label: str) -> random.Random:
    """Independent deterministic stream for one owner, e.g. the plant's encryptor."""
    return random.Random(f"{seed}:{label}")


def _l_function(x: int, n: int) -> int:
    return (x - 1) // n


def miller_rabin(n: int, rng: random.Random, rounds: int = config.MILLER_RABIN_ROUNDS) -> bool:
    """
    Probabilistic primality test.

    Parameters
    ----------------
    n: :class:`int`
        Number to test.
    rng: :class:`random.Random`
        Source of witnesses, seeded by the caller so key generation is reproducible.
    rounds: :class:`int`
        Number of random witnesses.

    Returns
    -------
    :class:`bool`
        False if ``n`` is certainly composite, True if it is probably prime.
    """
    if n < 2:
        return False
    for p in SMALL_PRIMES:
        if n == p:
            return True
        if n % p == 0:
            return False

    d, s = n - 1, 0
    while d % 2 == 0:
        d //= 2
        s += 1

    for _ in range(rounds):
        a = rng.randrange(2, n - 1)
        x = pow(a, d, n)
        if x in (1, n - 1):
            continue
        for _ in range(s - 1):
            x = pow(x, 2, n)
            if x == n - 1:
                break
        else:
            return False

    return True


def keypair_from_primes(p: int, q: int) -> Tuple[PublicKey, PrivateKey]:
    """
    Build a key pair from explicit primes. Test mode uses this for tiny keys.

    Raises
    ------
    :class:`ValueError`
        If the primes are equal, not prime, or violate gcd(pq, (p-1)(q-1)) = 1.
    """
    check_rng = random.Random(0)
    if p == q or not miller_rabin(p, check_rng) or not miller_rabin(q, check_rng):
        raise ValueError(f"({p}, {q}) is not a pair of distinct primes")

    n = p * q
    if math.gcd(n, (p - 1) * (q - 1)) != 1:
        raise ValueError(f"gcd(pq, (p-1)(q-1)) != 1 for ({p}, {q})")

    public = PublicKey(n=n, g=n + 1)
    lam = math.lcm(p - 1, q - 1)
    mu = pow(_l_function(pow(public.g, lam, public.n_squared), n), -1, n)

    return public, PrivateKey(lam=lam, mu=mu, public=public)


def keygen(bit_length: int, rng_seed: int) -> Tuple[PublicKey, PrivateKey]:
    """
    Generate a key pair deterministically from a seed.

    Parameters
    ----------------
    bit_length: :class:`int`
        Bit length of N, split evenly between p and q.
    rng_seed: :class:`int`
        Seed, identical seeds give identical keys.

    Raises
    ------
    :class:`PrimeSearchExhausted`
        If no valid pair turns up within :data:`config.PRIME_SEARCH_ATTEMPTS` candidates.
    """
    if bit_length < 4:
        raise ValueError(f"Key length {bit_length} is below the minimum of 4 bits")

    rng = random.Random(rng_seed)
    q_bits = bit_length // 2
    p_bits = bit_length - q_bits
    attempts = 0

    def next_prime(bits: int) -> int:
        nonlocal attempts
        while attempts < config.PRIME_SEARCH_ATTEMPTS:
            attempts += 1
            candidate = rng.getrandbits(bits) | (1 << (bits - 1)) | 1
            if miller_rabin(candidate, rng):
                return candidate
        raise PrimeSearchExhausted(f"No {bits}-bit prime found in {attempts} candidates")

    p = next_prime(p_bits)
    while True:
        q = next_prime(q_bits)
        if q != p and math.gcd(p * q, (p - 1) * (q - 1)) == 1:
            break

    public, private = keypair_from_primes(p, q)
    logger.debug(f"Generated {public.n.bit_length()}-bit Paillier key")
    return public, private


def _check_ciphertext(pk: PublicKey, c: Ciphertext):
    if not 0 <= c.value < pk.n_squared:
        raise CiphertextOutOfRange("Ciphertext is outside Z_{N²}")


def encrypt(pk: PublicKey, m: int, rng: random.Random) -> Ciphertext:
    """Encrypt ``0 <= m < N`` with a fresh unit r drawn from ``rng``."""
    m = int(m)
    if not 0 <= m < pk.n:
        raise MessageOutOfRange(f"Plaintext must be in [0, N), got {m}")

    while True:
        r = rng.randrange(1, pk.n)
        if math.gcd(r, pk.n) == 1:
            break

    # g = N + 1 gives g^m = 1 + mN mod N²
    g_m = (1 + m * pk.n) if pk.g == pk.n + 1 else pow(pk.g, m, pk.n_squared)
    return Ciphertext(value=g_m * pow(r, pk.n, pk.n_squared) % pk.n_squared)


def decrypt(sk: PrivateKey, c: Ciphertext) -> int:
    pk = sk.public
    _check_ciphertext(pk, c)
    return _l_function(pow(c.value, sk.lam, pk.n_squared), pk.n) * sk.mu % pk.n


def add_encrypted(pk: PublicKey, c1: Ciphertext, c2: Ciphertext) -> Ciphertext:
    _check_ciphertext(pk, c1)
    _check_ciphertext(pk, c2)
    return Ciphertext(value=c1.value * c2.value % pk.n_squared)


def scalar_mult(pk: PublicKey, a: int, c: Ciphertext) -> Ciphertext:
    a = int(a)
    if not 0 <= a < pk.n:
        raise ScalarOutOfRange(f"Scalar must be in [0, N), got {a}")
    _check_ciphertext(pk, c)

    return Ciphertext(value=pow(c.value, a, pk.n_squared))


def linear_combination(pk: PublicKey, scalars: Sequence[int], cts: Sequence[Ciphertext]) -> Ciphertext:
    """Encryption of sum(a_i * m_i) mod N."""
    if len(scalars) != len(cts) or len(scalars) == 0:
        raise LengthMismatch(f"{len(scalars)} scalars for {len(cts)} ciphertexts")

    total = scalar_mult(pk, scalars[0], cts[0])
    for a, c in zip(scalars[1:], cts[1:]):
        total = add_encrypted(pk, total, scalar_mult(pk, a, c))

    return total


def blind(bk: BlindingKey, m: int) -> int:
    return bk.r * int(m)


def unblind(bk: BlindingKey, c: int) -> int:
    quotient, remainder = divmod(int(c), bk.r)
    if remainder:
        raise NotDivisible("Blinded value is not a multiple of the blinding integer")

    return quotient


def dump_keys(sk: PrivateKey) -> str:
    """Serialize a key pair to an INI document with decimal integer fields."""
    parser = configparser.ConfigParser()
    parser["public"] = {"n": str(sk.public.n), "g": str(sk.public.g)}
    parser["private"] = {"lambda": str(sk.lam), "mu": str(sk.mu)}

    buffer = io.StringIO()
    parser.write(buffer)
    return buffer.getvalue()


def load_keys(text: str) -> Tuple[PublicKey, PrivateKey]:
    parser = configparser.ConfigParser()
    parser.read_string(text)
    try:
        public = PublicKey(n=int(parser["public"]["n"]), g=int(parser["public"]["g"]))
        private = PrivateKey(lam=int(parser["private"]["lambda"]), mu=int(parser["private"]["mu"]), public=public)
    except (KeyError, ValueError) as e:
        raise ValueError(f"Malformed key document: {e}") from e

    check = _l_function(pow(public.g, private.lam, public.n_squared), public.n) * private.mu % public.n
    if check != 1:
        raise ValueError("Key document fields are inconsistent")

    return public, private
