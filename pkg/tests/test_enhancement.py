import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from msdiar.enhancement import PRESET_ITERATIONS, AAConfig, enhance, softmax_rows, substitute_base_embeddings
from msdiar.embeddings import build_embedding_set
from msdiar.segmentation import SpeechRegion, segment_multiscale

# Refined rows for X = [[1, 0], [0, 2], [1, 1]], M below, tau = 0.30, N = 2,
# computed once with nested Python loops and math.exp.
HAND_X = [[1.0, 0.0], [0.0, 2.0], [1.0, 1.0]]
HAND_M = [[1.0, 0.5, 0.2], [0.5, 1.0, 0.3], [0.2, 0.3, 1.0]]
HAND_AFTER_1 = [
    [0.6748776773102612, 0.9473840751134456],
    [0.6256493424357226, 1.0521440606187387],
    [0.6879021764244686, 1.0092238846564467],
]
HAND_AFTER_2 = [
    [0.662782185677002, 1.0013596972441738],
    [0.6616010209803156, 1.004150455457974],
    [0.6636724951792635, 1.003399320512228],
]


def run_with_trace(x, m, cfg):
    maps = []
    out = enhance(x, m, cfg, trace=lambda i, a: maps.append(a.copy()))
    return out, maps


class TestEnhance:
    def test_hand_example(self):
        # N = 2: the first iteration uses A1 only, the second blends A1 and A2 evenly
        out, _ = run_with_trace(np.array(HAND_X), np.array(HAND_M), AAConfig(2, 0.30))
        np.testing.assert_allclose(out, HAND_AFTER_2, atol=1e-9)

    def test_single_iteration_is_a1(self):
        x, m = np.array(HAND_X), np.array(HAND_M)
        out, maps = run_with_trace(x, m, AAConfig(1, 0.30))
        np.testing.assert_array_equal(maps[0], softmax_rows(m * 0.30))
        np.testing.assert_allclose(out, softmax_rows(m * 0.30) @ x, atol=1e-15)

    def test_first_hand_iteration(self):
        # the first of two iterations is A1 X regardless of A2
        a1 = softmax_rows(np.array(HAND_M) * 0.30)
        np.testing.assert_allclose(a1 @ np.array(HAND_X), HAND_AFTER_1, atol=1e-9)

    def test_single_row(self):
        x = np.array([[0.3, -0.4]])
        out = enhance(x, np.array([[5.0]]), AAConfig(10, 0.3))
        np.testing.assert_array_equal(out, x)

    @pytest.mark.parametrize("n", [1, 10, 20])
    def test_rows_stochastic_every_iteration(self, n, rng):
        x = rng.standard_normal((12, 8))
        m = rng.uniform(-1, 1, (12, 12))
        m = (m + m.T) / 2
        _, maps = run_with_trace(x, m, AAConfig(n, 0.30))
        assert len(maps) == n
        for a in maps:
            np.testing.assert_allclose(a.sum(axis=1), 1.0, atol=1e-9)

    def test_blend_weight_schedule(self, rng):
        x = rng.standard_normal((5, 3))
        m = np.eye(5)
        n, tau = 4, 0.3
        _, maps = run_with_trace(x, m, AAConfig(n, tau))
        a1 = softmax_rows(m * tau)
        cur = x
        for i, a in enumerate(maps):
            u = cur / np.linalg.norm(cur, axis=1, keepdims=True)
            a2 = softmax_rows(u @ u.T * tau)
            np.testing.assert_allclose(a, ((n - i) * a1 + i * a2) / n, atol=1e-15)
            cur = a @ cur

    @given(st.integers(0, 500))
    def test_max_row_norm_non_increasing(self, seed):
        rng = np.random.default_rng(seed)
        x = rng.standard_normal((6, 4))
        m = rng.uniform(0, 1, (6, 6))
        _, maps = run_with_trace(x, m, AAConfig(5, 2.0))
        cur = x
        for a in maps:
            nxt = a @ cur
            assert np.linalg.norm(nxt, axis=1).max() <= np.linalg.norm(cur, axis=1).max() + 1e-12
            cur = nxt

    def test_deterministic(self, rng):
        x = rng.standard_normal((7, 4))
        m = rng.uniform(0, 1, (7, 7))
        assert enhance(x, m).tobytes() == enhance(x, m).tobytes()

    def test_zero_row_names_iteration_and_row(self):
        x = np.array([[1.0, 0.0], [0.0, 0.0]])
        with pytest.raises(ValueError, match="iteration 0.*row 1"):
            enhance(x, np.eye(2), AAConfig(2, 0.3))

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            enhance(np.ones((3, 2)), np.eye(2))

    def test_presets(self):
        assert PRESET_ITERATIONS == {"dihard1": 10, "dihard2": 20, "dihard3": 10, "voxconverse": 15}


class TestSubstitution:
    def make_set(self, regions, rng):
        segs = segment_multiscale(regions)
        return build_embedding_set(segs, [rng.standard_normal((len(s), 8)) for s in segs])

    def test_uses_largest_scale(self, rng):
        emb_set = self.make_set([SpeechRegion(0, 5.0)], rng)
        x = substitute_base_embeddings(emb_set)
        for i in range(emb_set.num_segments):
            np.testing.assert_array_equal(x[i], emb_set.embeddings[2][emb_set.mapping[i, 2]])

    def test_short_region_falls_back_to_base(self, rng):
        emb_set = self.make_set([SpeechRegion(0, 0.8)], rng)
        x = substitute_base_embeddings(emb_set)
        np.testing.assert_array_equal(x, emb_set.embeddings[0])

    def test_medium_region_uses_one_second(self, rng):
        emb_set = self.make_set([SpeechRegion(0, 1.2), SpeechRegion(3, 8)], rng)
        x = substitute_base_embeddings(emb_set)
        for i, seg in enumerate(emb_set.base_segments):
            s = 1 if seg.region == 0 else 2
            np.testing.assert_array_equal(x[i], emb_set.embeddings[s][emb_set.mapping[i, s]])

    def test_per_row_mapping_oracle(self, small_session):
        emb_set = small_session[0]
        x = substitute_base_embeddings(emb_set)
        region_len = {}
        for seg in emb_set.base_segments:
            lo, hi = region_len.get(seg.region, (seg.onset, seg.offset))
            region_len[seg.region] = (min(lo, seg.onset), max(hi, seg.offset))
        for i, seg in enumerate(emb_set.base_segments):
            lo, hi = region_len[seg.region]
            s = max(k for k, sc in enumerate(emb_set.scales) if sc.window <= hi - lo + 1e-9) if hi - lo >= 0.5 else 0
            np.testing.assert_array_equal(x[i], emb_set.embeddings[s][emb_set.mapping[i, s]])
