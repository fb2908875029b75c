import json
from dataclasses import replace

import numpy as np
import pytest

from msdiar.cli import bench_affinity, main
from msdiar.clustering import ClusteringConfig, cluster
from msdiar.embeddings import SyntheticSessionSpec, load_embeddings, save_embeddings, synthesize_session
from msdiar.gat import save_model
from msdiar.pipeline import PipelineConfig, StageError, run_diarize, run_manifest
from msdiar.rttm import read_rttm, write_rttm
from msdiar.training import TrainConfig, build_pairs, train

CLEAN = SyntheticSessionSpec(num_speakers=2, noise=(0.0, 0.0, 0.0), pause_prob=1.0, duration=40, seed=3, session_id="clean")


@pytest.fixture(scope="module")
def toy_model():
    # trained on the same speakers it is evaluated on; unseen centroids do not transfer
    emb_set, turns, _ = synthesize_session(CLEAN)
    pairs = build_pairs(turns, emb_set, max_pairs_per_combination=200, seed=0)
    return train(pairs, TrainConfig(epochs=30, lr=1e-3, seed=0))


@pytest.fixture
def session_dir(tmp_path):
    emb_set, turns, _ = synthesize_session(CLEAN)
    save_embeddings(tmp_path / "emb" / "clean", emb_set)
    write_rttm(tmp_path / "ref.rttm", "clean", turns)
    return tmp_path


class TestPipeline:
    def test_fusion_clean_session(self):
        emb_set, turns, _ = synthesize_session(CLEAN)
        res = run_diarize(emb_set, PipelineConfig(), turns)
        assert res.num_speakers == 2
        assert res.report.der == pytest.approx(0.0, abs=1e-9)

    def test_gat_clean_session(self, toy_model):
        emb_set, turns, _ = synthesize_session(CLEAN)
        res = run_diarize(emb_set, PipelineConfig(mode="gat"), turns, model=toy_model)
        assert res.report.der == pytest.approx(0.0, abs=1e-9)

    def test_single_scale_weights_equal_single_scale_run(self, small_session):
        emb_set, turns, _ = small_session
        a = run_diarize(emb_set, PipelineConfig(weights=(0.0, 0.0, 1.0)), turns)
        x = emb_set.embeddings[2][emb_set.mapping[:, 2]]
        x = x / np.linalg.norm(x, axis=1, keepdims=True)
        single = x @ x.T
        np.testing.assert_allclose(a.affinity.values, single, atol=1e-12)
        b = cluster(single, PipelineConfig().clustering)
        assert a.labels.tolist() == b.labels.tolist()

    def test_rerun_identical(self, small_session):
        emb_set, turns, _ = small_session
        cfg = PipelineConfig(aa=True)
        a, b = run_diarize(emb_set, cfg, turns), run_diarize(emb_set, cfg, turns)
        assert a.labels.tobytes() == b.labels.tobytes()
        assert a.affinity.values.tobytes() == b.affinity.values.tobytes()

    def test_gat_mode_without_model(self, small_session):
        with pytest.raises(StageError, match="gat"):
            run_diarize(small_session[0], PipelineConfig(mode="gat"))

    @pytest.mark.parametrize("handoff", ["refined", "blend"])
    def test_aa_handoffs_run(self, small_session, handoff):
        emb_set, turns, _ = small_session
        res = run_diarize(emb_set, PipelineConfig(aa=True, aa_handoff=handoff), turns)
        assert res.affinity.values.shape == (emb_set.num_segments,) * 2

    def test_regat_requires_gat(self):
        with pytest.raises(ValueError, match="regat"):
            PipelineConfig(aa_handoff="regat").validate()


class TestConfig:
    def test_roundtrip(self):
        cfg = PipelineConfig(mode="gat", weights=(0.2, 0.3, 0.5), aa=True, clustering=ClusteringConfig(eigen_threshold=30))
        back = PipelineConfig.from_dict(json.loads(cfg.to_json()))
        assert back == cfg
        assert back.digest() == cfg.digest()

    def test_presets(self):
        vox = PipelineConfig().with_preset("voxconverse")
        assert (vox.clustering.eigen_threshold, vox.aa_config.iterations, vox.collar) == (80, 15, 0.25)
        d2 = PipelineConfig().with_preset("dihard2")
        assert (d2.clustering.eigen_threshold, d2.aa_config.iterations, d2.collar) == (38, 20, 0.0)
        with pytest.raises(ValueError):
            PipelineConfig().with_preset("ami")

    def test_bad_weights(self):
        with pytest.raises(ValueError):
            replace(PipelineConfig(), weights=(0.5, 0.5)).validate()

    def test_manifest(self):
        cfg = PipelineConfig()
        man = run_manifest(cfg, ["a", "b"])
        assert man["config_sha256"] == cfg.digest()
        assert man["sessions"] == ["a", "b"]
        assert {"msdiar", "numpy", "python"} <= set(man["versions"])


class TestCli:
    def test_diarize_scores_clean_session(self, session_dir, capsys):
        out = session_dir / "hyp.rttm"
        rc = main(["diarize", "--emb-dir", str(session_dir / "emb"), "--ref", str(session_dir / "ref.rttm"), "--out", str(out)])
        assert rc == 0
        assert "OVERALL\tDER   0.00" in capsys.readouterr().err
        assert list(read_rttm(out)) == ["clean"]

    def test_diarize_rerun_byte_identical(self, session_dir):
        a, b = session_dir / "a.rttm", session_dir / "b.rttm"
        for dest in (a, b):
            assert main(["diarize", "--emb-dir", str(session_dir / "emb"), "--aa", "--out", str(dest)]) == 0
        assert a.read_bytes() == b.read_bytes()

    def test_missing_scale(self, session_dir, capsys):
        (session_dir / "emb" / "clean" / "scale_1.5.mseb").unlink()
        rc = main(["diarize", "--emb-dir", str(session_dir / "emb")])
        assert rc != 0
        assert "scale 1.5 missing" in capsys.readouterr().err

    def test_gat_cli(self, session_dir, toy_model, capsys):
        model_path = session_dir / "toy.gatm"
        save_model(model_path, toy_model)
        rc = main(["diarize", "--emb-dir", str(session_dir / "emb"), "--mode", "gat", "--model", str(model_path),
                   "--ref", str(session_dir / "ref.rttm"), "--out", str(session_dir / "hyp.rttm")])
        assert rc == 0
        assert "OVERALL\tDER   0.00" in capsys.readouterr().err

    def test_manifest_and_affinity_dump(self, session_dir):
        man, aff = session_dir / "run.json", session_dir / "aff"
        rc = main(["diarize", "--emb-dir", str(session_dir / "emb"), "--out", str(session_dir / "h.rttm"),
                   "--manifest", str(man), "--save-affinity", str(aff), "--seed", "4"])
        assert rc == 0
        data = json.loads(man.read_text())
        assert data["seed"] == 4 and data["config"]["clustering"]["seed"] == 4
        assert (aff / "clean.affm").exists()

    def test_dump_config(self, capsys):
        assert main(["diarize", "--preset", "voxconverse", "--dump-config"]) == 0
        cfg = PipelineConfig.from_dict(json.loads(capsys.readouterr().out))
        assert cfg.collar == 0.25

    def test_score(self, session_dir, capsys):
        ref = str(session_dir / "ref.rttm")
        assert main(["score", "--ref", ref, "--hyp", ref, "--json"]) == 0
        assert json.loads(capsys.readouterr().out)["overall"]["der"] == 0.0

    def test_synth_segment_train(self, tmp_path, capsys):
        assert main(["synth", "--out", str(tmp_path), "--sessions", "2", "--speakers", "2", "--duration", "20"]) == 0
        sids = sorted(p.name for p in (tmp_path / "emb").iterdir())
        assert sids == ["synth000", "synth001"]
        assert load_embeddings(tmp_path / "emb" / "synth000").num_segments > 0
        regions = tmp_path / "regions" / "synth000.txt"
        assert main(["segment", "--regions", str(regions), "--out", str(tmp_path / "seg")]) == 0
        seg = json.loads((tmp_path / "seg" / "segments_0.5.json").read_text())
        assert seg["window"] == 0.5 and seg["segments"]
        rc = main(["train-gat", "--rttm-dir", str(tmp_path / "rttm"), "--emb-dir", str(tmp_path / "emb"),
                   "--out", str(tmp_path / "m.gatm"), "--epochs", "1", "--pairs-cap", "20", "--log", str(tmp_path / "log.jsonl")])
        assert rc == 0 and (tmp_path / "m.gatm").exists()
        assert json.loads((tmp_path / "log.jsonl").read_text().splitlines()[0])["step"] == 0

    def test_segment_from_probs(self, tmp_path):
        probs = tmp_path / "p.txt"
        np.savetxt(probs, np.r_[np.zeros(100), np.ones(300), np.zeros(100)])
        assert main(["segment", "--probs", str(probs), "--out", str(tmp_path / "seg")]) == 0
        assert (tmp_path / "seg" / "regions.txt").read_text().strip()

    def test_bench_helper(self):
        elapsed, values = bench_affinity(20, 1)
        assert values.shape == (20, 20) and elapsed > 0
