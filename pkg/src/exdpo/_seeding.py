import hashlib


def derive_seed(*parts) -> int:
    """Hash ``parts`` into a 63-bit seed.

    Child seeds are derived by hashing, never by incrementing, so adding a
    consumer never shifts the streams of the others.
    """
    text = "/".join(str(p) for p in parts)
    digest = hashlib.sha256(text.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little") & (2**63 - 1)
