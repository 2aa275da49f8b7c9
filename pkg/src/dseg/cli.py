"""Command line entry points.

Option precedence for training: explicit flags override values from a JSON
config file, which override built-in defaults. Exit codes: 0 success, 2 usage
error, 1 operational failure (bad file, bad data, failed run).
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import evaluate as ev
from . import phantom, preprocess, trainer
from .errors import ConfigurationError, DsegError


def _parse_floats(text: str, n: int, what: str) -> tuple[float, ...]:
    parts = text.split(",")
    if len(parts) != n:
        raise ConfigurationError(f"{what} expects {n} comma-separated numbers, got {text!r}")
    try:
        return tuple(float(p) for p in parts)
    except ValueError as exc:
        raise ConfigurationError(f"{what}: {exc}") from exc


def cmd_phantom(args: argparse.Namespace) -> int:
    radii = _parse_floats(args.blob_radius, 2, "--blob-radius")
    spec = phantom.PhantomSpec(
        grid_size=args.grid_size,
        blob_radius_range=radii,
        noise_sigma=args.noise_sigma,
        seed=args.seed,
    )
    fractions = _parse_floats(args.fractions, 3, "--fractions")
    cases = phantom.generate_dataset(spec, args.healthy, args.disease, fractions)
    out = Path(args.out)
    # the central organ is pinned near the volume centre, which doubles as
    # the crop landmark for the preprocessing pipeline
    c = spec.grid_size // 2
    landmarks = {case.case_id: (c, c, c) for case in cases}
    preprocess.save_dataset(cases, out, landmarks=landmarks)
    counts = {s: sum(c.split == s for c in cases) for s in phantom.SPLITS}
    print(f"wrote {len(cases)} cases to {out} (splits: {counts})")
    return 0


def cmd_preprocess(args: argparse.Namespace) -> int:
    clip = _parse_floats(args.clip, 2, "--clip")
    cfg = preprocess.PreprocessConfig(suv_clip=clip, crop_size=args.crop, out_size=args.size)
    manifest = preprocess.run_pipeline(Path(args.manifest), cfg, Path(args.out))
    n = len(preprocess.read_manifest(manifest))
    print(f"preprocessed {n} cases into {args.out}")
    return 0


def _load_train_config(args: argparse.Namespace) -> trainer.TrainConfig:
    merged = trainer.TrainConfig().to_dict()
    if args.config is not None:
        cfg_path = Path(args.config)
        if not cfg_path.exists():
            raise ConfigurationError(f"config file not found: {cfg_path}")
        try:
            loaded = json.loads(cfg_path.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigurationError(f"{cfg_path}: invalid JSON ({exc})") from exc
        if not isinstance(loaded, dict):
            raise ConfigurationError(f"{cfg_path}: expected a JSON object")
        for key, value in loaded.items():
            if key not in merged:
                raise ConfigurationError(f"{cfg_path}: unknown config key {key!r}")
            if isinstance(merged[key], dict) and isinstance(value, dict):
                unknown = set(value) - set(merged[key])
                if unknown:
                    raise ConfigurationError(
                        f"{cfg_path}: unknown keys {sorted(unknown)} under {key!r}"
                    )
                merged[key].update(value)
            else:
                merged[key] = value
    overrides = {
        "method": args.method,
        "epochs": args.epochs,
        "lr": args.lr,
        "critic_lr": args.critic_lr,
        "n_critic": args.n_critic,
        "seed": args.seed,
    }
    for key, value in overrides.items():
        if value is not None:
            merged[key] = value
    if args.mask_gradient is not None:
        merged["mask_gradient"] = args.mask_gradient == "on"
    return trainer.TrainConfig.from_dict(merged)


def cmd_train(args: argparse.Namespace) -> int:
    cfg = _load_train_config(args)
    cases = preprocess.load_dataset(Path(args.data))
    meta = trainer.fit(cases, cfg, Path(args.out))
    print(
        f"best checkpoint: {meta.path} (epoch {meta.epoch}, "
        f"val combo {meta.val_combo:.6f})"
    )
    return 0


def _load_cases(data_dir: str, split: str) -> list:
    cases = preprocess.load_dataset(Path(data_dir))
    if split != "all":
        cases = [c for c in cases if c.split == split]
    if not cases:
        raise ConfigurationError(f"no cases with split {split!r} in {data_dir}")
    return cases


def cmd_evaluate(args: argparse.Namespace) -> int:
    model, _ = trainer.load_checkpoint(Path(args.checkpoint))
    cases = _load_cases(args.data, args.split)
    report = ev.evaluate(model, cases, threshold=args.threshold)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.json").write_text(report.to_json() + "\n")
    (out / "report.txt").write_text(report.to_text() + "\n")
    print(report.to_text())
    return 0


def cmd_infer(args: argparse.Namespace) -> int:
    model, _ = trainer.load_checkpoint(Path(args.checkpoint))
    volume = preprocess.read_array(Path(args.volume))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    result = ev.infer_case(model, volume.astype(np.float32))
    preprocess.write_array(out / "mask_prob.dseg", result["mask_prob"])
    mask = ev.binarize(result["mask_prob"], args.threshold).astype(np.uint8)
    preprocess.write_array(out / "mask.dseg", mask)
    written = ["mask_prob.dseg", "mask.dseg"]
    for key, fname in (("recon", "recon.dseg"), ("pseudo_healthy", "pseudo_healthy.dseg")):
        if key in result:
            preprocess.write_array(out / fname, result[key])
            written.append(fname)
    print(f"wrote {', '.join(written)} to {out}")
    return 0


def cmd_render(args: argparse.Namespace) -> int:
    model, _ = trainer.load_checkpoint(Path(args.checkpoint))
    cases = _load_cases(args.data, "all")
    matches = [c for c in cases if c.case_id == args.case_id]
    if not matches:
        raise ConfigurationError(f"case {args.case_id!r} not found in {args.data}")
    path = ev.render_case(model, matches[0], Path(args.out), args.run_id)
    print(f"wrote {path}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="dseg",
        description="3D lesion segmentation with healthy/disease latent disentanglement",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("phantom", help="synthetic phantom dataset")
    psub = p.add_subparsers(dest="subcommand", required=True)
    g = psub.add_parser("generate", help="generate and save a phantom dataset")
    g.add_argument("--out", required=True, help="output dataset directory")
    g.add_argument("--healthy", type=int, required=True, help="number of healthy cases")
    g.add_argument("--disease", type=int, required=True, help="number of disease cases")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--grid-size", type=int, default=32)
    g.add_argument("--blob-radius", default="2.5,5.0", help="organ/lesion radius range lo,hi")
    g.add_argument("--noise-sigma", type=float, default=0.03)
    g.add_argument("--fractions", default="0.8,0.1,0.1", help="train,val,test fractions")
    g.set_defaults(func=cmd_phantom)

    p = sub.add_parser("preprocess", help="clip/crop/resize pipeline")
    psub = p.add_subparsers(dest="subcommand", required=True)
    r = psub.add_parser("run", help="preprocess a manifest of raw volumes")
    r.add_argument("--manifest", required=True, help="input manifest TSV")
    r.add_argument("--out", required=True, help="output dataset directory")
    r.add_argument("--crop", type=int, default=128, help="crop side before resizing")
    r.add_argument("--size", type=int, default=64, help="output side")
    r.add_argument("--clip", default="0,15", help="intensity clip lo,hi")
    r.set_defaults(func=cmd_preprocess)

    t = sub.add_parser("train", help="train a model")
    t.add_argument("--data", required=True, help="preprocessed dataset directory")
    t.add_argument("--out", required=True, help="run directory for checkpoints/logs")
    t.add_argument("--config", help="JSON config file (flags override it)")
    t.add_argument("--method", choices=trainer.METHODS)
    t.add_argument("--epochs", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--critic-lr", type=float)
    t.add_argument("--n-critic", type=int)
    t.add_argument("--seed", type=int)
    t.add_argument("--mask-gradient", choices=("on", "off"))
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("evaluate", help="evaluate a checkpoint on a dataset split")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--out", required=True, help="directory for report.json/report.txt")
    e.add_argument("--split", default="test", choices=("train", "val", "test", "all"))
    e.add_argument("--threshold", type=float, default=ev.THRESHOLD)
    e.set_defaults(func=cmd_evaluate)

    i = sub.add_parser("infer", help="run a checkpoint on a single volume")
    i.add_argument("--checkpoint", required=True)
    i.add_argument("--volume", required=True, help="input volume container")
    i.add_argument("--out", required=True)
    i.add_argument("--threshold", type=float, default=ev.THRESHOLD)
    i.set_defaults(func=cmd_infer)

    m = sub.add_parser("render", help="write a slice montage for one case")
    m.add_argument("--checkpoint", required=True)
    m.add_argument("--data", required=True)
    m.add_argument("--case-id", required=True)
    m.add_argument("--out", required=True)
    m.add_argument("--run-id", default="eval")
    m.set_defaults(func=cmd_render)
    return parser


def cli_dispatch(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code is not None else 0
    try:
        return args.func(args)
    except (DsegError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


def main() -> None:
    raise SystemExit(cli_dispatch())


if __name__ == "__main__":
    main()
