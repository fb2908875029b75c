import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from msdiar.rttm import Turn
from msdiar.scoring import assign_max_overlap, optimal_mapping, score, score_sessions

from oracles import brute_force_assignment, frame_der, random_turns


def relabel(turns, mapping):
    return [Turn(t.onset, t.offset, mapping[t.speaker]) for t in turns]


class TestScore:
    def test_perfect(self):
        ref = [Turn(0, 3, "a"), Turn(3, 7, "b"), Turn(6, 9, "a")]
        for collar in (0.0, 0.25, 1.0):
            assert score(ref, ref, collar).der == 0.0

    def test_empty_hypothesis(self):
        rep = score([Turn(0, 4, "a"), Turn(5, 6, "b")], [])
        assert (rep.der, rep.ms, rep.fa, rep.sc) == (100.0, 100.0, 0.0, 0.0)

    def test_one_second_confusion(self):
        ref = [Turn(0, 5, "A"), Turn(5, 10, "B")]
        hyp = [Turn(0, 6, "x"), Turn(6, 10, "y")]
        rep = score(ref, hyp)
        assert rep.sc == pytest.approx(10.0)
        assert rep.fa == rep.ms == 0.0
        assert rep.der == pytest.approx(frame_der(ref, hyp)[0], abs=1e-9)

    def test_false_alarm_and_miss(self):
        ref = [Turn(0, 10, "a")]
        hyp = [Turn(2, 12, "x")]
        rep = score(ref, hyp)
        assert rep.fa == pytest.approx(20.0)
        assert rep.ms == pytest.approx(20.0)
        assert rep.sc == 0.0

    def test_overlap_scored(self):
        ref = [Turn(0, 10, "a"), Turn(5, 10, "b")]
        rep = score(ref, [Turn(0, 10, "x")])
        # 15 s of reference speech, 5 s of the overlapped speaker missed
        assert rep.scored_time == pytest.approx(15.0)
        assert rep.ms == pytest.approx(100 * 5 / 15)

    def test_collar_excludes_boundaries(self):
        ref = [Turn(0, 5, "a"), Turn(5, 10, "b")]
        hyp = [Turn(0, 5.2, "x"), Turn(5.2, 10, "y")]
        assert score(ref, hyp, 0.0).sc > 0
        assert score(ref, hyp, 0.25).der == 0.0

    def test_empty_reference(self):
        with pytest.raises(ValueError):
            score([], [Turn(0, 1, "x")])

    def test_negative_collar(self):
        with pytest.raises(ValueError):
            score([Turn(0, 1, "a")], [], -0.1)

    @pytest.mark.parametrize("seed", range(10))
    def test_matches_frame_oracle(self, seed):
        rng = np.random.default_rng(seed)
        ref = random_turns(rng, int(rng.integers(1, 4)), 40)
        hyp = random_turns(rng, int(rng.integers(1, 4)), 40, prefix="h")
        collar = float(rng.choice([0.0, 0.25]))
        rep = score(ref, hyp, collar)
        der, fa, ms, sc = frame_der(ref, hyp, collar)
        assert rep.der == pytest.approx(der, abs=0.01)
        assert (rep.fa, rep.ms, rep.sc) == pytest.approx((fa, ms, sc), abs=0.01)

    @given(st.integers(0, 10_000))
    def test_decomposition_identity(self, seed):
        rng = np.random.default_rng(seed)
        rep = score(random_turns(rng, 3, 30), random_turns(rng, 2, 30, prefix="h"), 0.1)
        assert rep.der == rep.fa + rep.ms + rep.sc
        assert min(rep.fa, rep.ms, rep.sc) >= 0

    @given(st.integers(0, 10_000))
    def test_relabel_invariance(self, seed):
        rng = np.random.default_rng(seed)
        ref = random_turns(rng, 3, 30)
        hyp = random_turns(rng, 3, 30, prefix="h")
        renamed = relabel(hyp, {"h0": "zz", "h1": "aa", "h2": "mm"})
        assert score(ref, hyp).as_dict() == pytest.approx(score(ref, renamed).as_dict(), abs=1e-9)

    @given(st.integers(0, 10_000))
    def test_collar_monotone_error_time(self, seed):
        rng = np.random.default_rng(seed)
        ref = random_turns(rng, 2, 30)
        hyp = random_turns(rng, 2, 30, prefix="h")
        reps = [score(ref, hyp, c) for c in (0.0, 0.1, 0.25, 0.5)]
        err = [r.der * r.scored_time / 100 for r in reps]
        assert all(a >= b - 1e-9 for a, b in zip(err, err[1:]))

    def test_collar_can_raise_der_percentage(self):
        # the scored time shrinks faster than the error time, so the ratio rises
        rng = np.random.default_rng(0)
        ref = random_turns(rng, 2, 30)
        hyp = random_turns(rng, 2, 30, prefix="h")
        assert score(ref, hyp, 0.5).der > score(ref, hyp, 0.0).der


class TestMapping:
    def test_identity(self):
        ref = [Turn(0, 2, "a"), Turn(2, 4, "b")]
        assert optimal_mapping(ref, ref) == {"a": "a", "b": "b"}

    def test_swap(self):
        ref = [Turn(0, 2, "a"), Turn(2, 4, "b")]
        assert optimal_mapping(ref, relabel(ref, {"a": "b", "b": "a"})) == {"b": "a", "a": "b"}

    @given(st.integers(0, 10_000), st.integers(2, 5), st.integers(2, 5))
    def test_assignment_matches_brute_force(self, seed, r, c):
        ov = np.random.default_rng(seed).uniform(0, 10, (r, c))
        pairs = assign_max_overlap(ov)
        assert len(pairs) == min(r, c)
        assert sum(ov[i, j] for i, j in pairs) == pytest.approx(brute_force_assignment(ov))


class TestSessions:
    def test_time_weighted(self):
        refs = {"b": [Turn(0, 10, "a")], "a": [Turn(0, 30, "a")]}
        hyps = {"a": [Turn(0, 30, "x")], "b": []}
        agg, per = score_sessions(refs, hyps)
        assert list(per) == ["a", "b"]
        assert agg.ms == pytest.approx(25.0)
        assert agg.der == pytest.approx(agg.fa + agg.ms + agg.sc)
