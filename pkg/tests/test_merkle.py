"""Merkle tree: construction, paths, descent, weight hashing, sidecar."""

import hashlib

import numpy as np
import pytest

from vtrain import merkle

EMPTY_SHA256 = "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855"


def leaf(i: int) -> bytes:
    return hashlib.sha256(f"leaf-{i}".encode()).digest()


class TestBuild:
    def test_single_leaf_is_root(self):
        h = leaf(0)
        assert merkle.build([h]).root == h

    def test_two_leaves(self):
        h1, h2 = leaf(1), leaf(2)
        assert merkle.build([h1, h2]).root == hashlib.sha256(h1 + h2).digest()

    def test_odd_promotion(self):
        h1, h2, h3 = leaf(1), leaf(2), leaf(3)
        inner = hashlib.sha256(h1 + h2).digest()
        assert merkle.build([h1, h2, h3]).root == hashlib.sha256(inner + h3).digest()

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            merkle.build([])

    def test_bad_leaf_rejected(self):
        with pytest.raises(ValueError):
            merkle.build([b"short"])

    def test_deterministic(self):
        leaves = [leaf(i) for i in range(13)]
        assert merkle.build(leaves).root == merkle.build(leaves).root

    def test_single_leaf_substitution_changes_root(self):
        leaves = [leaf(i) for i in range(16)]
        base = merkle.build(leaves).root
        for i in range(16):
            changed = list(leaves)
            changed[i] = leaf(100 + i)
            assert merkle.build(changed).root != base


class TestNodeAndPath:
    def test_node_lookup(self):
        t = merkle.build([leaf(1), leaf(2), leaf(3)])
        assert merkle.node(t, 0, 2) == leaf(3)
        assert merkle.node(t, 1, 0) == hashlib.sha256(leaf(1) + leaf(2)).digest()
        assert merkle.node(t, 2, 0) == t.root

    def test_node_out_of_range(self):
        t = merkle.build([leaf(1)])
        with pytest.raises(IndexError):
            merkle.node(t, 0, 1)
        with pytest.raises(IndexError):
            merkle.node(t, 5, 0)

    def test_single_leaf_path_empty(self):
        t = merkle.build([leaf(0)])
        p = merkle.path(t, 0)
        assert p.siblings == []
        assert merkle.verify_path(p, t.root)

    def test_two_leaf_path(self):
        t = merkle.build([leaf(1), leaf(2)])
        p = merkle.path(t, 0)
        assert p.siblings == [(leaf(2), "right")]
        assert merkle.verify_path(p, t.root)

    @pytest.mark.parametrize("n", [1, 2, 3, 5, 8, 13, 31, 64])
    def test_all_paths_verify(self, n):
        t = merkle.build([leaf(i) for i in range(n)])
        for i in range(n):
            assert merkle.verify_path(merkle.path(t, i), t.root)

    def test_tampered_path_fails(self):
        t = merkle.build([leaf(i) for i in range(8)])
        p = merkle.path(t, 3)
        p.siblings[1] = (leaf(99), p.siblings[1][1])
        assert not merkle.verify_path(p, t.root)


class TestFirstDivergence:
    def test_identical_trees(self):
        t = merkle.build([leaf(i) for i in range(8)])
        assert merkle.first_divergence(t, t) is None

    def test_last_leaf_differs(self):
        a = merkle.build([leaf(i) for i in range(8)])
        b_leaves = [leaf(i) for i in range(7)] + [leaf(99)]
        b = merkle.build(b_leaves)
        assert merkle.first_divergence(a, b) == 7

    def test_count_mismatch(self):
        a = merkle.build([leaf(1)])
        b = merkle.build([leaf(1), leaf(2)])
        with pytest.raises(ValueError, match="checkpoint schedule mismatch"):
            merkle.first_divergence(a, b)

    def test_matches_linear_scan_oracle(self):
        rng = np.random.default_rng(3)
        for trial in range(200):
            n = int(rng.integers(1, 40))
            base = [leaf(i) for i in range(n)]
            other = list(base)
            flips = rng.integers(0, n, size=int(rng.integers(0, 4)))
            for f in flips:
                other[int(f)] = leaf(1000 + trial * 100 + int(f))
            a, b = merkle.build(base), merkle.build(other)
            oracle = next((i for i in range(n) if base[i] != other[i]), None)
            assert merkle.first_divergence(a, b) == oracle

    @pytest.mark.parametrize("n", range(1, 65))
    def test_query_bound(self, n):
        base = [leaf(i) for i in range(n)]
        other = list(base)
        other[n - 1] = leaf(777)
        a, b = merkle.build(base), merkle.build(other)
        _, comparisons = merkle._descend(a, b)
        assert comparisons <= 2 * int(np.ceil(np.log2(max(n, 2)))) + 2


class TestHashWeights:
    def test_empty_model(self):
        assert merkle.hash_weights([]).hex() == EMPTY_SHA256

    def test_digest_length(self):
        d = merkle.hash_weights([np.ones((2, 3)), np.zeros(3)])
        assert len(d) == 32

    def test_sub_fp32_bits_ignored(self):
        w1 = [np.array([0.1, 0.2, 0.3])]
        w2 = [np.array([0.1, 0.2, 0.3]) * (1.0 + 2.0**-40)]
        assert merkle.hash_weights(w1) == merkle.hash_weights(w2)

    def test_fp32_bit_changes_digest(self):
        w1 = [np.array([0.1, 0.2, 0.3])]
        w2 = [np.array([0.1, 0.2, 0.3 * (1.0 + 2.0**-20)])]
        assert merkle.hash_weights(w1) != merkle.hash_weights(w2)

    def test_canonical_bytes(self):
        w = np.arange(6, dtype=np.float64).reshape(2, 3)
        expected = hashlib.sha256(w.astype("<f4").tobytes()).digest()
        assert merkle.hash_weights([w]) == expected

    def test_non_finite_named(self):
        w = [np.zeros(3), np.array([1.0, np.inf, 2.0])]
        with pytest.raises(ValueError, match="tensor 1.*index 1"):
            merkle.hash_weights(w)

    def test_only_fp32_target(self):
        with pytest.raises(ValueError):
            merkle.hash_weights([np.zeros(2)], b_m=16)


class TestSidecar:
    def test_roundtrip(self, tmp_path):
        t = merkle.build([leaf(i) for i in range(9)])
        p = tmp_path / "t.vtmt"
        merkle.write_tree(t, p)
        back = merkle.read_tree(p)
        assert back.leaves == t.leaves
        assert back.root == t.root

    def test_bad_magic(self, tmp_path):
        p = tmp_path / "bad.vtmt"
        p.write_bytes(b"XXXX" + bytes(20))
        with pytest.raises(ValueError, match="not a checkpoint tree"):
            merkle.read_tree(p)

    def test_truncated(self, tmp_path):
        t = merkle.build([leaf(0), leaf(1)])
        p = tmp_path / "trunc.vtmt"
        merkle.write_tree(t, p)
        p.write_bytes(p.read_bytes()[:-5])
        with pytest.raises(ValueError, match="truncated"):
            merkle.read_tree(p)

    def test_root_prints_lowercase_hex(self):
        t = merkle.build([leaf(0)])
        assert t.root_hex == t.root.hex()
        assert t.root_hex == t.root_hex.lower()
        assert len(t.root_hex) == 64
