import pathlib

import pytest
from cryptography.hazmat.primitives.ciphers import Cipher, algorithms, modes

DATA = pathlib.Path(__file__).parent / "data"


def oracle_encrypt(key: bytes, data: bytes) -> bytes:
    enc = Cipher(algorithms.AES(key), modes.ECB()).encryptor()
    return enc.update(data) + enc.finalize()


def oracle_decrypt(key: bytes, data: bytes) -> bytes:
    dec = Cipher(algorithms.AES(key), modes.ECB()).decryptor()
    return dec.update(data) + dec.finalize()


@pytest.fixture
def kat_path():
    return DATA / "aes_kat.txt"
