"""SHA-256 Merkle tree over weight-checkpoint digests.

Internal nodes hash the concatenation of their children; an unpaired node
at any level is promoted unchanged (no duplication, which avoids the
duplicate-leaf malleability of the doubling rule). Weight hashing fixes a
canonical serialization so two independent runs hash identically: tensors
in declared order, row-major elements, each cast to FP32 and written as
four little-endian bytes.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

TREE_MAGIC = b"VTMT"
TREE_VERSION = 1
DIGEST_LEN = 32


def _sha256(data: bytes) -> bytes:
    return hashlib.sha256(data).digest()


@dataclass
class MerkleTree:
    leaves: list[bytes]
    levels: list[list[bytes]] = field(repr=False)

    @property
    def root(self) -> bytes:
        return self.levels[-1][0]

    @property
    def root_hex(self) -> str:
        return self.root.hex()


@dataclass
class MerklePath:
    """Authentication path: the leaf digest plus sibling digests to the root.

    ``side`` is the sibling's position ("left" or "right"). Levels where
    the on-path node was promoted contribute no sibling.
    """

    leaf_index: int
    leaf: bytes
    siblings: list[tuple[bytes, str]]


def build(leaves: list[bytes]) -> MerkleTree:
    """Build a tree over the given ordered leaf digests."""
    if not leaves:
        raise ValueError("cannot build a Merkle tree with no leaves")
    for i, leaf in enumerate(leaves):
        if not isinstance(leaf, bytes) or len(leaf) != DIGEST_LEN:
            raise ValueError(f"leaf {i} is not a 32-byte digest")
    levels = [list(leaves)]
    while len(levels[-1]) > 1:
        cur = levels[-1]
        nxt = []
        for i in range(0, len(cur), 2):
            if i + 1 < len(cur):
                nxt.append(_sha256(cur[i] + cur[i + 1]))
            else:
                nxt.append(cur[i])
        levels.append(nxt)
    return MerkleTree(leaves=list(leaves), levels=levels)


def node(tree: MerkleTree, level: int, index: int) -> bytes:
    """Digest at (level, index); level 0 is the leaves."""
    if not 0 <= level < len(tree.levels):
        raise IndexError(f"level {level} out of range")
    row = tree.levels[level]
    if not 0 <= index < len(row):
        raise IndexError(f"index {index} out of range at level {level}")
    return row[index]


def path(tree: MerkleTree, leaf_index: int) -> MerklePath:
    """Authentication path for one leaf."""
    if not 0 <= leaf_index < len(tree.leaves):
        raise IndexError(f"leaf index {leaf_index} out of range")
    siblings: list[tuple[bytes, str]] = []
    idx = leaf_index
    for level in range(len(tree.levels) - 1):
        row = tree.levels[level]
        if idx % 2 == 0:
            if idx + 1 < len(row):
                siblings.append((row[idx + 1], "right"))
            # else promoted: no sibling at this level
        else:
            siblings.append((row[idx - 1], "left"))
        idx //= 2
    return MerklePath(leaf_index=leaf_index, leaf=tree.leaves[leaf_index], siblings=siblings)


def verify_path(p: MerklePath, root: bytes) -> bool:
    """Recompute the root from a path and compare."""
    h = p.leaf
    for sibling, side in p.siblings:
        if side == "right":
            h = _sha256(h + sibling)
        elif side == "left":
            h = _sha256(sibling + h)
        else:
            return False
    return h == root


def _descend(a: MerkleTree, b: MerkleTree) -> tuple[int, int]:
    """Leftmost divergent leaf index and the number of child comparisons."""
    level = len(a.levels) - 1
    index = 0
    comparisons = 0
    while level > 0:
        child = level - 1
        li = 2 * index
        row_a, row_b = a.levels[child], b.levels[child]
        if li + 1 >= len(row_a):
            index = li  # promoted single child carries the parent digest
            level = child
            continue
        comparisons += 1
        if row_a[li] != row_b[li]:
            index = li
        else:
            comparisons += 1
            if row_a[li + 1] == row_b[li + 1]:
                raise RuntimeError("parent digests differ but both children match")
            index = li + 1
        level = child
    return index, comparisons


def first_divergence(a: MerkleTree, b: MerkleTree) -> int | None:
    """Smallest leaf index where the trees disagree, or None if roots match.

    Descends only into children of mismatching nodes, so the work is
    logarithmic in the leaf count.
    """
    if len(a.leaves) != len(b.leaves):
        raise ValueError("checkpoint schedule mismatch")
    if a.root == b.root:
        return None
    index, _ = _descend(a, b)
    return index


def hash_weights(tensors, b_m: int = 32) -> bytes:
    """SHA-256 over the canonical FP32 serialization of parameter tensors."""
    if b_m != 32:
        raise ValueError("only FP32 target precision is supported")
    h = hashlib.sha256()
    for i, t in enumerate(tensors):
        arr = np.ascontiguousarray(t, dtype=np.float64)
        if not np.all(np.isfinite(arr)):
            bad = int(np.flatnonzero(~np.isfinite(arr))[0])
            raise ValueError(f"non-finite weight in tensor {i} at flat index {bad}")
        h.update(arr.astype("<f4").tobytes(order="C"))
    return h.digest()


def write_tree(tree: MerkleTree, path_out) -> None:
    """Persist leaf digests to the binary sidecar format."""
    data = TREE_MAGIC + bytes([TREE_VERSION]) + len(tree.leaves).to_bytes(8, "little")
    Path(path_out).write_bytes(data + b"".join(tree.leaves))


def read_tree(path_in) -> MerkleTree:
    """Load a sidecar file and rebuild the tree from its leaves."""
    raw = Path(path_in).read_bytes()
    if len(raw) < 13 or raw[:4] != TREE_MAGIC:
        raise ValueError("not a checkpoint tree file")
    if raw[4] != TREE_VERSION:
        raise ValueError(f"unsupported tree version {raw[4]}")
    count = int.from_bytes(raw[5:13], "little")
    body = raw[13:]
    if len(body) != count * DIGEST_LEN:
        raise ValueError("checkpoint tree file is truncated")
    leaves = [bytes(body[i * DIGEST_LEN : (i + 1) * DIGEST_LEN]) for i in range(count)]
    return build(leaves)
