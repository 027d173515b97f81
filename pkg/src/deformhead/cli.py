"""Command-line entry point.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import sys
from pathlib import Path
from typing import Optional

import numpy as np

from . import storage
from .config import ABLATIONS, ConfigError, TrainConfig, load_config
from .synthetic import DataError, gen_synthetic, load_cameras, load_clip, load_dataset

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4

log = logging.getLogger("deformhead")


def _config(args) -> TrainConfig:
    cfg = load_config(args.config) if args.config else TrainConfig()
    if getattr(args, "ablation", None):
        cfg = cfg.with_ablation(args.ablation)
    if getattr(args, "threads", None):
        cfg = _replace(cfg, threads=args.threads)
    if getattr(args, "seed", None) is not None:
        cfg = _replace(cfg, seed=args.seed)
    return cfg


def _replace(cfg, **kw):
    from dataclasses import replace
    return replace(cfg, **kw)


def cmd_gen_data(args) -> int:
    gen_synthetic(args.identities, args.frames, args.seed, args.out, size=args.size)
    print(json.dumps({"out": str(args.out), "identities": args.identities, "frames": args.frames}))
    return EXIT_OK


def cmd_pretrain(args) -> int:
    from .train import pretrain, save_model
    cfg = _config(args)
    clips = load_dataset(args.data)
    res = pretrain(clips, cfg)
    save_model(args.out, res.model, "pretrained")
    print(json.dumps(_summary(res)))
    return EXIT_OK


def cmd_adapt(args) -> int:
    from .train import adapt, load_model, save_model
    cfg = _config(args) if args.config or args.ablation or args.threads or args.seed is not None else None
    model = load_model(args.pretrained, cfg)
    clip = load_clip(_identity_dir(args.target))
    res = adapt(clip, model, cfg)
    save_model(args.out, res.model, "adapted")
    print(json.dumps(_summary(res)))
    return EXIT_OK


def _summary(res) -> dict:
    h = res.history
    return {"steps": len(h), "seconds": round(res.seconds, 2),
            "first_total": h[0]["total"] if h else None, "last_total": h[-1]["total"] if h else None,
            "skipped_steps": res.skipped_steps}


def _identity_dir(path) -> Path:
    """Accept an identity directory or a one-identity dataset directory."""
    p = Path(path)
    if (p / "audio.bin").exists():
        return p
    meta = p / "dataset.json"
    if meta.exists():
        names = json.loads(meta.read_text())["identities"]
        return p / names[0]
    raise DataError(f"{p} is neither an identity nor a dataset directory")


def cmd_render(args) -> int:
    from .train import Tracks, load_model, render_video
    model = load_model(args.ckpt)
    sig = _identity_dir(args.signals)
    audio = storage.read_tensor(sig / "audio.bin")
    motion = storage.read_tensor(sig / "motion.bin")
    size = model.config.image_size
    cams = load_cameras(args.cameras, size)
    if not (len(audio) == len(motion) == len(cams)):
        raise DataError(f"signal/camera lengths differ: audio {len(audio)}, motion {len(motion)}, cameras {len(cams)}")
    import torch
    tracks = Tracks(torch.as_tensor(audio, dtype=model.dtype), torch.as_tensor(motion, dtype=model.dtype), cams, None)
    n = render_video(model, tracks, args.out, identity=args.identity, coarse=args.coarse)
    print(json.dumps({"frames": n, "out": str(args.out)}))
    return EXIT_OK


def cmd_eval(args) -> int:
    from .train import evaluate, load_model, load_reference_field
    model = load_model(args.ckpt)
    clip = load_clip(_identity_dir(args.clip))
    override = None
    if args.reference_field:
        override = load_reference_field(Path(clip.path) / "reference_field.ckpt", model.dtype)
    stop = args.stop if args.stop is not None else None
    report = evaluate(model, clip, identity=args.identity, start=args.start, stop=stop,
                      field_override=override, general_only=args.general_only)
    text = json.dumps(_jsonable(report), indent=2, sort_keys=True)
    if args.report:
        Path(args.report).write_text(text + "\n")
    print(text)
    return EXIT_OK


def _jsonable(x):
    if isinstance(x, dict):
        return {k: _jsonable(v) for k, v in x.items()}
    if isinstance(x, float) and math.isinf(x):
        return "inf"
    if isinstance(x, (np.floating, np.integer)):
        return x.item()
    return x


def cmd_gradcheck(args) -> int:
    from .gradcheck import MODULES, run_gradchecks
    names = list(MODULES) if args.module == "all" else [args.module]
    worst = 0.0
    for name in names:
        st = run_gradchecks(name, seeds=args.seeds)
        worst = max(worst, st.worst)
        verdict = "PASS" if st.worst <= args.tol and st.checked else "FAIL"
        print(f"gradcheck {name}: max rel err {st.worst:.3e} over {st.checked} coordinates "
              f"({st.skipped} kink-straddling stencils skipped) {verdict}")
        if not st.checked:
            worst = math.inf
    return EXIT_OK if worst <= args.tol else EXIT_NUMERIC


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="deformhead", description="Few-shot deformable Gaussian head fields")
    p.add_argument("-q", "--quiet", action="store_true", help="only log warnings and errors")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="write a synthetic multi-identity dataset")
    g.add_argument("--identities", type=int, default=3)
    g.add_argument("--frames", type=int, default=200)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--size", type=int, default=64)
    g.add_argument("--out", required=True)
    g.set_defaults(fn=cmd_gen_data)

    def train_opts(sp):
        sp.add_argument("--config", help="JSON training config (unknown keys are rejected)")
        sp.add_argument("--ablation", choices=sorted(ABLATIONS), help="apply a named ablation preset")
        sp.add_argument("--threads", type=int, help="intra-op threads; 1 gives bit-deterministic runs")
        sp.add_argument("--seed", type=int)

    t = sub.add_parser("pretrain", help="multi-identity pretraining")
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    train_opts(t)
    t.set_defaults(fn=cmd_pretrain)

    a = sub.add_parser("adapt", help="adapt a pretrained checkpoint to a target clip")
    a.add_argument("--target", required=True)
    a.add_argument("--pretrained", required=True)
    a.add_argument("--out", required=True)
    train_opts(a)
    a.set_defaults(fn=cmd_adapt)

    r = sub.add_parser("render", help="render frames from signals and a camera track")
    r.add_argument("--ckpt", required=True)
    r.add_argument("--signals", required=True, help="directory with audio.bin and motion.bin")
    r.add_argument("--cameras", required=True, help="JSON list of [R9, t3, fx, fy, cx, cy]")
    r.add_argument("--out", required=True)
    r.add_argument("--coarse", action="store_true", help="also write the unrefined frames")
    r.add_argument("--identity", type=int, help="pretraining identity (checkpoints with kept fields)")
    r.set_defaults(fn=cmd_render)

    e = sub.add_parser("eval", help="metrics report for a clip")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--clip", required=True)
    e.add_argument("--report")
    e.add_argument("--start", type=int, default=0)
    e.add_argument("--stop", type=int)
    e.add_argument("--identity", type=int)
    e.add_argument("--general-only", action="store_true", help="zero the Individual Field")
    e.add_argument("--reference-field", action="store_true",
                   help="drive the clip's hidden reference static field instead of the learned one")
    e.set_defaults(fn=cmd_eval)

    c = sub.add_parser("gradcheck", help="finite-difference gradient checks")
    c.add_argument("--module", default="all")
    c.add_argument("--seeds", type=int, default=10)
    c.add_argument("--tol", type=float, default=1e-4)
    c.set_defaults(fn=cmd_gradcheck)
    return p


def main(argv: Optional[list] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO, stream=sys.stderr,
                        format="%(message)s")
    from .train import DataMismatchError, NumericError
    from .storage import CheckpointError
    try:
        return args.fn(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, DataMismatchError, CheckpointError, storage.TensorFormatError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (NumericError, FloatingPointError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
