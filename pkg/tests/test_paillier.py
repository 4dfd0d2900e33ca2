import math
import random

import pytest

from modules.errors import (
    CiphertextOutOfRange,
    LengthMismatch,
    MessageOutOfRange,
    NotDivisible,
    PrimeSearchExhausted,
    ScalarOutOfRange,
)
from modules.paillier import (
    BlindingKey,
    Ciphertext,
    add_encrypted,
    blind,
    decrypt,
    derive_rng,
    dump_keys,
    encrypt,
    keygen,
    keypair_from_primes,
    linear_combination,
    load_keys,
    miller_rabin,
    scalar_mult,
    unblind,
)


@pytest.fixture
def tiny_keys():
    return keypair_from_primes(5, 7)


@pytest.fixture
def keys_512():
    return keygen(512, 1)


def test_tiny_keypair_values(tiny_keys):
    public, private = tiny_keys
    assert public.n == 35
    assert public.g == 36
    assert private.lam == 12


def test_keygen_six_bits_gives_smallest_valid_pair():
    public, private = keygen(6, 0)
    assert public.n == 35
    assert private.lam == 12


def test_keygen_too_small():
    with pytest.raises(PrimeSearchExhausted):
        keygen(4, 0)
    with pytest.raises(ValueError):
        keygen(3, 0)


def test_keygen_invariants(keys_512):
    public, private = keys_512
    assert public.n.bit_length() == 512
    assert public.g == public.n + 1
    # L(g^λ mod N²) μ = 1 mod N
    assert (pow(public.g, private.lam, public.n_squared) - 1) // public.n * private.mu % public.n == 1


def test_keygen_deterministic():
    assert keygen(128, 9) == keygen(128, 9)
    assert keygen(128, 9)[0] != keygen(128, 10)[0]


def test_keypair_from_primes_validation():
    with pytest.raises(ValueError):
        keypair_from_primes(7, 7)
    with pytest.raises(ValueError):
        keypair_from_primes(9, 7)
    # gcd(3*7, 2*6) = 3
    with pytest.raises(ValueError):
        keypair_from_primes(3, 7)


def test_miller_rabin():
    rng = random.Random(0)
    assert miller_rabin(2, rng)
    assert miller_rabin(7919, rng)
    assert miller_rabin(2**61 - 1, rng)
    assert not miller_rabin(1, rng)
    assert not miller_rabin(561, rng)
    assert not miller_rabin(2**61 + 1, rng)


def test_encrypt_decrypt_tiny(tiny_keys):
    public, private = tiny_keys
    rng = random.Random(1)
    assert decrypt(private, encrypt(public, 0, rng)) == 0
    assert decrypt(private, encrypt(public, 9, rng)) == 9


def test_encryption_is_probabilistic(keys_512):
    public, private = keys_512
    rng = random.Random(2)
    first, second = encrypt(public, 42, rng), encrypt(public, 42, rng)
    assert first != second
    assert decrypt(private, first) == decrypt(private, second) == 42


def test_decrypt_with_unit_randomness(tiny_keys):
    public, private = tiny_keys
    assert decrypt(private, Ciphertext(pow(public.g, 9, public.n_squared))) == 9


def test_range_checks(tiny_keys):
    public, private = tiny_keys
    rng = random.Random(0)
    with pytest.raises(MessageOutOfRange):
        encrypt(public, 35, rng)
    with pytest.raises(MessageOutOfRange):
        encrypt(public, -1, rng)
    with pytest.raises(CiphertextOutOfRange):
        decrypt(private, Ciphertext(public.n_squared))
    with pytest.raises(ScalarOutOfRange):
        scalar_mult(public, 35, encrypt(public, 1, rng))


def test_homomorphic_operations_tiny(tiny_keys):
    public, private = tiny_keys
    rng = random.Random(3)

    def enc(m):
        return encrypt(public, m, rng)

    assert decrypt(private, add_encrypted(public, enc(3), enc(4))) == 7
    assert decrypt(private, add_encrypted(public, enc(30), enc(10))) == 5
    assert decrypt(private, add_encrypted(public, enc(17), enc(0))) == 17
    assert decrypt(private, scalar_mult(public, 5, enc(4))) == 20
    assert decrypt(private, scalar_mult(public, 1, enc(13))) == 13
    assert decrypt(private, scalar_mult(public, 0, enc(13))) == 0
    assert decrypt(private, linear_combination(public, [2, 3], [enc(4), enc(5)])) == 23
    assert decrypt(private, linear_combination(public, [0, 0], [enc(4), enc(5)])) == 0


def test_linear_combination_length_mismatch(tiny_keys):
    public, _ = tiny_keys
    rng = random.Random(0)
    with pytest.raises(LengthMismatch):
        linear_combination(public, [1, 2], [encrypt(public, 1, rng)])
    with pytest.raises(LengthMismatch):
        linear_combination(public, [], [])


def test_homomorphic_laws_512(keys_512):
    public, private = keys_512
    n = public.n
    rng = random.Random(4)
    values = random.Random(5)

    for _ in range(20):
        m1, m2, a = values.randrange(n), values.randrange(n), values.randrange(n)
        c1, c2 = encrypt(public, m1, rng), encrypt(public, m2, rng)
        assert decrypt(private, add_encrypted(public, c1, c2)) == (m1 + m2) % n
        assert decrypt(private, scalar_mult(public, a, c1)) == a * m1 % n

        scalars = [values.randrange(n) for _ in range(4)]
        messages = [values.randrange(n) for _ in range(4)]
        cts = [encrypt(public, m, rng) for m in messages]
        expected = sum(s * m for s, m in zip(scalars, messages)) % n
        assert decrypt(private, linear_combination(public, scalars, cts)) == expected


@pytest.mark.slow
def test_homomorphic_laws_512_sweep(keys_512):
    public, private = keys_512
    n = public.n
    rng = random.Random(6)
    values = random.Random(7)

    for _ in range(1000):
        m1, m2, a = values.randrange(n), values.randrange(n), values.randrange(n)
        c1, c2 = encrypt(public, m1, rng), encrypt(public, m2, rng)
        assert decrypt(private, add_encrypted(public, c1, c2)) == (m1 + m2) % n
        assert decrypt(private, scalar_mult(public, a, c1)) == a * m1 % n

        scalars = [values.randrange(n) for _ in range(3)]
        messages = [values.randrange(n) for _ in range(3)]
        cts = [encrypt(public, m, rng) for m in messages]
        expected = sum(s * m for s, m in zip(scalars, messages)) % n
        assert decrypt(private, linear_combination(public, scalars, cts)) == expected


def test_blinding():
    bk = BlindingKey(r=3, r_max=100)
    assert blind(bk, -4) == -12
    assert blind(bk, 0) == 0
    assert unblind(bk, 24) == 8
    assert unblind(bk, -12) == -4
    assert unblind(bk, blind(bk, 17)) == 17
    assert unblind(BlindingKey(r=1, r_max=2), 25) == 25
    with pytest.raises(NotDivisible):
        unblind(bk, 25)


def test_blinding_key_sampling():
    with pytest.raises(ValueError):
        BlindingKey(r=0, r_max=10)
    with pytest.raises(ValueError):
        BlindingKey(r=10, r_max=10)

    rng = derive_rng(3, "blind")
    samples = [BlindingKey.sample(rng, 2**20).r for _ in range(100)]
    assert all(1 <= r < 2**20 for r in samples)
    assert BlindingKey.sample(derive_rng(3, "blind"), 2**20).r == samples[0]
    assert BlindingKey.sample(random.Random(0), 2).r == 1


def test_derive_rng_streams_are_independent():
    assert derive_rng(1, "encrypt").random() != derive_rng(1, "blind").random()
    assert derive_rng(1, "encrypt").random() == derive_rng(1, "encrypt").random()


def test_key_document_round_trip(keys_512):
    public, private = keys_512
    loaded_public, loaded_private = load_keys(dump_keys(private))
    assert loaded_public == public
    assert (loaded_private.lam, loaded_private.mu) == (private.lam, private.mu)


def test_key_document_inconsistent(tiny_keys):
    _, private = tiny_keys
    text = dump_keys(private).replace(f"mu = {private.mu}", f"mu = {(private.mu + 1) % 35}")
    with pytest.raises(ValueError):
        load_keys(text)
    with pytest.raises(ValueError):
        load_keys("[public]\nn = 35\n")


def test_public_key_validation():
    from modules.paillier import PublicKey

    with pytest.raises(ValueError):
        PublicKey(n=9, g=10)
    with pytest.raises(ValueError):
        PublicKey(n=35, g=35)
    assert math.gcd(PublicKey(n=35, g=36).g, 35 * 35) == 1
