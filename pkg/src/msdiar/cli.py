"""Command-line entry point: ``msdiar <subcommand> ...``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import replace
from pathlib import Path

import numpy as np

from .affinity import save_affinity
from .embeddings import SyntheticSessionSpec, load_embeddings, save_embeddings, synthesize_session
from .enhancement import AAConfig
from .gat import build_gat_affinity, default_workers, init_model, save_model
from .pipeline import PipelineConfig, StageError, run_diarize, run_manifest
from .rttm import format_rttm, read_rttm, write_rttm
from .scoring import score_sessions
from .segmentation import read_regions, segment_multiscale, smooth_sad, write_regions
from .training import PairSet, TrainConfig, build_pairs, train

log = logging.getLogger("msdiar")


def _floats(text: str) -> tuple[float, ...]:
    return tuple(float(v) for v in text.split(","))


def _session_dirs(root: Path) -> list[Path]:
    if any(root.glob("*.mseb")):
        return [root]
    dirs = sorted(p for p in root.iterdir() if p.is_dir())
    if not dirs:
        raise StageError("embedding_store", str(root), "no session directories found")
    return dirs


def _read_refs(path: Path | None) -> dict:
    if path is None:
        return {}
    files = sorted(path.glob("*.rttm")) if path.is_dir() else [path]
    refs: dict = {}
    for f in files:
        refs.update(read_rttm(f))
    return refs


# ---------------------------------------------------------------------------


def cmd_segment(args) -> int:
    config = PipelineConfig.load(args.config) if args.config else PipelineConfig()
    if args.regions:
        regions = read_regions(args.regions)
    else:
        probs = np.loadtxt(args.probs, ndmin=1)
        regions = smooth_sad(probs, args.frame_rate, args.window, args.ratio, args.ratio)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_regions(out / "regions.txt", regions)
    for scale, segs in zip(config.scales, segment_multiscale(regions, config.scales)):
        payload = {"window": scale.window, "shift": scale.shift, "segments": [[s.onset, s.offset] for s in segs]}
        (out / f"segments_{scale.name}.json").write_text(json.dumps(payload, indent=1) + "\n")
    print(f"{len(regions)} regions written to {out}")
    return 0


def cmd_synth(args) -> int:
    out = Path(args.out)
    for k in range(args.sessions):
        sid = f"{args.prefix}{k:03d}"
        spec = SyntheticSessionSpec(
            num_speakers=args.speakers,
            separation=args.separation,
            noise=_floats(args.noise),
            noise_norm=args.noise_norm,
            duration=args.duration,
            overlap_fraction=args.overlap,
            seed=args.seed + k,
            session_id=sid,
        )
        emb_set, turns, regions = synthesize_session(spec)
        save_embeddings(out / "emb" / sid, emb_set)
        (out / "rttm").mkdir(parents=True, exist_ok=True)
        (out / "regions").mkdir(parents=True, exist_ok=True)
        write_rttm(out / "rttm" / f"{sid}.rttm", sid, turns)
        write_regions(out / "regions" / f"{sid}.txt", regions)
    print(f"{args.sessions} synthetic sessions written to {out}")
    return 0


def cmd_train(args) -> int:
    refs = _read_refs(Path(args.rttm_dir))
    parts = []
    for d in _session_dirs(Path(args.emb_dir)):
        emb_set = load_embeddings(d)
        turns = refs.get(emb_set.session_id)
        if turns is None:
            log.warning("no reference turns for session %s, skipped", emb_set.session_id)
            continue
        parts.append(build_pairs(turns, emb_set, args.pairs_cap, seed=args.seed))
    if not parts:
        raise StageError("gat_train", args.emb_dir, "no sessions with reference turns")
    pairs = PairSet.concat(parts)
    log.info("%d training pairs (%d positive)", len(pairs), int(pairs.labels.sum()))
    cfg = TrainConfig(epochs=args.epochs, batch_size=args.batch, lr=args.lr, seed=args.seed)
    log_fh = open(args.log, "w") if args.log else None
    try:
        model = train(pairs, cfg, log_file=log_fh)
    finally:
        if log_fh:
            log_fh.close()
    save_model(args.out, model)
    print(f"model written to {args.out}")
    return 0


def _pipeline_config(args) -> PipelineConfig:
    cfg = PipelineConfig.load(args.config) if args.config else PipelineConfig()
    if args.preset:
        cfg = cfg.with_preset(args.preset)
    updates = {}
    if args.mode:
        updates["mode"] = args.mode
    if args.weights:
        updates["weights"] = _floats(args.weights)
    if args.model:
        updates["model_path"] = args.model
    if args.aa:
        updates["aa"] = True
    if args.aa_tau is not None or args.aa_iters is not None:
        updates["aa_config"] = AAConfig(
            args.aa_iters if args.aa_iters is not None else cfg.aa_config.iterations,
            args.aa_tau if args.aa_tau is not None else cfg.aa_config.temperature,
        )
    if args.aa_handoff:
        updates["aa_handoff"] = args.aa_handoff
    if args.threshold is not None:
        updates["clustering"] = replace(cfg.clustering, eigen_threshold=args.threshold)
    if args.collar is not None:
        updates["collar"] = args.collar
    if args.seed is not None:
        updates["seed"] = args.seed
        updates["clustering"] = replace(updates.get("clustering", cfg.clustering), seed=args.seed)
    cfg = replace(cfg, **updates)
    cfg.validate()
    return cfg


def cmd_diarize(args) -> int:
    cfg = _pipeline_config(args)
    if args.dump_config:
        print(cfg.to_json())
        return 0
    refs = _read_refs(Path(args.ref)) if args.ref else {}
    dirs = _session_dirs(Path(args.emb_dir))
    model = None
    if cfg.mode == "gat" or cfg.aa_handoff == "regat":
        if not cfg.model_path:
            raise StageError("gat", "-", "gat mode needs --model")
        from .gat import load_model

        model = load_model(cfg.model_path)

    def one(d: Path):
        emb_set = load_embeddings(d, cfg.scales)
        return run_diarize(emb_set, cfg, refs.get(emb_set.session_id), model)

    workers = min(len(dirs), default_workers())
    if workers > 1:
        # sessions in parallel; each affinity build then runs single-threaded
        cfg = replace(cfg, workers=1)
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(one, dirs))
    else:
        results = [one(d) for d in dirs]
    results.sort(key=lambda r: r.session_id)

    hyp = {r.session_id: r.turns for r in results}
    text = format_rttm(hyp)
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    if args.save_affinity:
        Path(args.save_affinity).mkdir(parents=True, exist_ok=True)
        for r in results:
            save_affinity(Path(args.save_affinity) / f"{r.session_id}.affm", r.affinity)
    if args.manifest:
        manifest = run_manifest(cfg, [r.session_id for r in results])
        Path(args.manifest).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    scored = {r.session_id: r.turns for r in results if r.report is not None}
    if scored:
        agg, per = score_sessions({k: refs[k] for k in scored}, scored, cfg.collar)
        for sid, rep in per.items():
            print(f"{sid}\tDER {rep.der:6.2f}  FA {rep.fa:5.2f}  MS {rep.ms:5.2f}  SC {rep.sc:5.2f}", file=sys.stderr)
        print(f"OVERALL\tDER {agg.der:6.2f}  FA {agg.fa:5.2f}  MS {agg.ms:5.2f}  SC {agg.sc:5.2f}", file=sys.stderr)
    return 0


def cmd_score(args) -> int:
    refs, hyps = read_rttm(args.ref), read_rttm(args.hyp)
    agg, per = score_sessions(refs, hyps, args.collar)
    rows = {sid: rep.as_dict() for sid, rep in per.items()}
    if args.json:
        print(json.dumps({"overall": agg.as_dict(), "sessions": rows}, indent=2))
    else:
        for sid, rep in per.items():
            print(f"{sid}\tDER {rep.der:6.2f}  FA {rep.fa:5.2f}  MS {rep.ms:5.2f}  SC {rep.sc:5.2f}")
        print(f"OVERALL\tDER {agg.der:6.2f}  FA {agg.fa:5.2f}  MS {agg.ms:5.2f}  SC {agg.sc:5.2f}")
    return 0


def bench_affinity(n_segments: int, workers: int, seed: int = 0, model=None) -> tuple[float, np.ndarray]:
    """Time one GAT affinity build over ``n_segments`` random base segments."""
    from .embeddings import build_embedding_set
    from .segmentation import DEFAULT_SCALES, Segment

    rng = np.random.default_rng(seed)
    segs = [[Segment(s, 0.25 * i, 0.25 * i + sc.window, 0) for i in range(n_segments)] for s, sc in enumerate(DEFAULT_SCALES)]
    embs = [rng.standard_normal((n_segments, 256)) for _ in DEFAULT_SCALES]
    emb_set = build_embedding_set(segs, embs, DEFAULT_SCALES, "bench")
    model = model or init_model(seed=seed)
    start = time.perf_counter()
    aff = build_gat_affinity(emb_set, model, workers=workers)
    return time.perf_counter() - start, aff.values


def cmd_bench(args) -> int:
    n_pairs = args.segments * (args.segments + 1) // 2
    model = None
    if args.model:
        from .gat import load_model

        model = load_model(args.model)
    for w in sorted({1, args.workers}):
        elapsed, _ = bench_affinity(args.segments, w, args.seed, model)
        print(f"workers={w}\tL={args.segments}\tpairs={n_pairs}\t{elapsed:.2f}s\t{n_pairs / elapsed:,.0f} pairs/s")
    return 0


def cmd_benchmark(args) -> int:
    from .benchmark import BenchmarkConfig, ordering_checks, run_benchmark

    cfg = BenchmarkConfig(n_sessions=args.sessions, train_sessions=args.train_sessions)
    model = None
    if args.model:
        from .gat import load_model

        model = load_model(args.model)
    res = run_benchmark(cfg, model)
    for name, der in res["der"].items():
        print(f"{name:10s} DER {der:6.2f}  count error {res['count_error'][name]:.2f}")
    ok = ordering_checks(res["der"])
    for name, passed in ok.items():
        print(f"{'PASS' if passed else 'FAIL'}  {name}")
    print(f"{res['seconds']:.1f}s")
    return 0 if all(ok.values()) else 1


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="msdiar", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("segment", help="speech regions -> multi-scale segments")
    src = s.add_mutually_exclusive_group(required=True)
    src.add_argument("--regions", help="two-column onset/offset file")
    src.add_argument("--probs", help="framewise speech probabilities, one per line")
    s.add_argument("--frame-rate", type=float, default=100.0)
    s.add_argument("--window", type=float, default=0.5)
    s.add_argument("--ratio", type=float, default=0.7)
    s.add_argument("--config")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_segment)

    s = sub.add_parser("synth", help="write synthetic sessions (embeddings + RTTM)")
    s.add_argument("--out", required=True)
    s.add_argument("--sessions", type=int, default=1)
    s.add_argument("--speakers", type=int, default=3)
    s.add_argument("--separation", type=float, default=90.0)
    s.add_argument("--noise", default="0.8,0.5,0.3")
    s.add_argument("--noise-norm", type=float, default=4.0)
    s.add_argument("--duration", type=float, default=60.0)
    s.add_argument("--overlap", type=float, default=0.0)
    s.add_argument("--prefix", default="synth")
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("train-gat", help="train the GAT similarity model")
    s.add_argument("--rttm-dir", required=True)
    s.add_argument("--emb-dir", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--epochs", type=int, default=50)
    s.add_argument("--batch", type=int, default=50)
    s.add_argument("--lr", type=float, default=1e-4)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--pairs-cap", type=int, default=None, help="max pairs per speaker combination")
    s.add_argument("--log", help="line-delimited JSON training log")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("diarize", help="run the pipeline on embedding directories")
    s.add_argument("--emb-dir", required=False, default=".")
    s.add_argument("--config", help="JSON pipeline configuration")
    s.add_argument("--preset", choices=["dihard1", "dihard2", "dihard3", "voxconverse"])
    s.add_argument("--mode", choices=["fusion", "gat"])
    s.add_argument("--weights", help="comma-separated fusion weights per scale")
    s.add_argument("--model")
    s.add_argument("--aa", action="store_true")
    s.add_argument("--aa-tau", type=float)
    s.add_argument("--aa-iters", type=int)
    s.add_argument("--aa-handoff", choices=["refined", "blend", "regat"])
    s.add_argument("--threshold", type=float, help="eigenvalue threshold in percent")
    s.add_argument("--collar", type=float)
    s.add_argument("--seed", type=int)
    s.add_argument("--ref", help="reference RTTM file or directory")
    s.add_argument("--out", help="hypothesis RTTM (default: stdout)")
    s.add_argument("--manifest", help="write a run manifest JSON here")
    s.add_argument("--save-affinity", help="directory for AFFM affinity dumps")
    s.add_argument("--dump-config", action="store_true", help="print the resolved configuration and exit")
    s.set_defaults(func=cmd_diarize)

    s = sub.add_parser("score", help="DER of a hypothesis RTTM against a reference")
    s.add_argument("--ref", required=True)
    s.add_argument("--hyp", required=True)
    s.add_argument("--collar", type=float, default=0.0)
    s.add_argument("--json", action="store_true")
    s.set_defaults(func=cmd_score)

    s = sub.add_parser("bench", help="time GAT affinity construction")
    s.add_argument("--segments", type=int, default=500)
    s.add_argument("--workers", type=int, default=default_workers())
    s.add_argument("--model")
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_bench)

    s = sub.add_parser("benchmark", help="synthetic DER comparison of all affinity configurations")
    s.add_argument("--sessions", type=int, default=20)
    s.add_argument("--train-sessions", type=int, default=2000)
    s.add_argument("--model", help="skip training and use this GAT model")
    s.set_defaults(func=cmd_benchmark)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except StageError as err:
        print(f"error: {err}", file=sys.stderr)
        return 2
    except (FileNotFoundError, ValueError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
