#!/usr/bin/env python3
"""Reference MurmurHash64A used to freeze test vectors for the classifier."""
import sys

M = 0xC6A4A7935BD1E995
R = 47
MASK = (1 << 64) - 1


def murmur64a(key: bytes, seed: int) -> int:
    h = (seed ^ (len(key) * M)) & MASK
    nblocks = len(key) // 8
    for i in range(nblocks):
        k = int.from_bytes(key[8 * i:8 * i + 8], "little")
        k = (k * M) & MASK
        k ^= k >> R
        k = (k * M) & MASK
        h ^= k
        h = (h * M) & MASK
    tail = key[8 * nblocks:]
    rem = len(key) & 7
    if rem:
        for i in range(rem - 1, -1, -1):
            h ^= tail[i] << (8 * i)
        h = (h * M) & MASK
    h ^= h >> R
    h = (h * M) & MASK
    h ^= h >> R
    return h


if __name__ == "__main__":
    for text, seed in [(b"", 0), (b"a", 0), (b"hello, world", 0), (b"0123456789abcdef", 0x1234)]:
        print(text, hex(seed), f"0x{murmur64a(text, seed):016x}")
    if len(sys.argv) > 2:
        print(f"0x{murmur64a(sys.argv[1].encode(), int(sys.argv[2], 0)):016x}")
