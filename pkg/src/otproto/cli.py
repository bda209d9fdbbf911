"""Operator-facing commands: synth | train | infer | eval | export-protos | assignments.

Every config-file key maps 1:1 onto a flag of the same name; explicit flags
beat config-file values which beat the built-in defaults. Exit codes:
0 success, 1 runtime failure, 2 usage/config error. Log and report output
is line-oriented with stable prefixes and no timestamps, so identical runs
produce identical bytes.
"""

from __future__ import annotations

import argparse
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import formats
from .core import TrainConfig
from .errors import ConfigError, OTProtoError
from .learn import load_state, train
from .metrics import evaluate_samples, report_kv_lines, report_text
from .score import aggregate, reconstruct_prototypes, restore_image_patches, score_grid
from .sinkhorn import SolverParams

_INT_KEYS = {"n": 16, "max_sinkhorn_iters": 100, "epochs": 50, "batch_size": 64, "rng_seed": 0}
_FLOAT_KEYS = {
    "eta": 0.95,
    "alpha_local": 0.3,
    "epsilon": 0.01,
    "init_std": 1.0,
    "init_mean": 0.0,
    "marginal_tol": 1e-6,
}
_BOOL_KEYS = {"log_domain": True}
_TRAIN_KEYS = {**_INT_KEYS, **_FLOAT_KEYS, **_BOOL_KEYS}


def _fmt(x: float) -> str:
    return f"{x:.9g}"


def _parse_bool(text: str, key: str) -> bool:
    lowered = str(text).strip().lower()
    if lowered in ("1", "true", "yes", "on"):
        return True
    if lowered in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"{key}: expected a boolean, got {text!r}")


def _resolve_train_settings(args) -> dict:
    """defaults < config file < explicit flags."""
    settings = dict(_TRAIN_KEYS)
    if args.config:
        raw = formats.parse_config(args.config)
        for key, value in raw.items():
            if key not in _TRAIN_KEYS:
                raise ConfigError(f"unknown config key {key!r} (no flag of that name)")
            try:
                if key in _INT_KEYS:
                    settings[key] = int(value)
                elif key in _FLOAT_KEYS:
                    settings[key] = float(value)
                else:
                    settings[key] = _parse_bool(value, key)
            except ValueError as exc:
                raise ConfigError(f"{key}: {exc}") from exc
    for key in _TRAIN_KEYS:
        flag_value = getattr(args, key)
        if flag_value is not None:
            settings[key] = _parse_bool(flag_value, key) if key in _BOOL_KEYS else flag_value
    return settings


def _load_split_grids(manifest: formats.Manifest, split: str) -> tuple[list[str], dict[int, list]]:
    """Grids keyed by scale, sample order preserved; all samples must agree on scales."""
    entries = manifest.split(split)
    if not entries:
        raise ConfigError(f"manifest has no '{split}' samples")
    scales = sorted(entries[0].grids)
    by_scale: dict[int, list] = {s: [] for s in scales}
    for entry in entries:
        if sorted(entry.grids) != scales:
            raise ConfigError(f"sample {entry.id} lists scales {sorted(entry.grids)}, expected {scales}")
        for scale in scales:
            by_scale[scale].append(formats.read_fgrd(manifest.resolve(entry.grids[scale])))
    return [e.id for e in entries], by_scale


# ---------------------------------------------------------------------------
# commands


def cmd_synth(args) -> int:
    manifest_path = formats.synth_dataset(
        args.out,
        kind=args.kind,
        clusters=args.clusters,
        height=args.height,
        width=args.width,
        dim=args.dim,
        noise=args.noise,
        n_train=args.n_train,
        n_test=args.n_test,
        n_test_good=args.n_test_good,
        seed=args.seed,
        image_height=args.image_height,
        image_width=args.image_width,
        two_scales=args.two_scales,
    )
    print(f"manifest={manifest_path}")
    return 0


def cmd_train(args) -> int:
    settings = _resolve_train_settings(args)
    manifest = formats.load_manifest(args.manifest)
    _, by_scale = _load_split_grids(manifest, "train")
    cfg = TrainConfig(
        n=settings["n"],
        eta=settings["eta"],
        alpha_local=settings["alpha_local"],
        epsilon=settings["epsilon"],
        max_sinkhorn_iters=settings["max_sinkhorn_iters"],
        epochs=settings["epochs"],
        batch_size=settings["batch_size"],
        rng_seed=settings["rng_seed"],
        init_std=settings["init_std"],
        init_mean=settings["init_mean"],
    )
    solver = SolverParams(
        epsilon=cfg.epsilon,
        max_iters=cfg.max_sinkhorn_iters,
        marginal_tol=settings["marginal_tol"],
        log_domain=settings["log_domain"],
    )
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    log_lines: list[str] = []

    def on_epoch(record: dict) -> None:
        line = (
            f"epoch={record['epoch']} scale={record['scale']} alpha={record['alpha']:g} "
            f"mean_cost={_fmt(record['mean_cost'])} converged_frac={record['converged_frac']:.6f}"
        )
        log_lines.append(line)
        print(line)

    state = train(
        by_scale,
        cfg,
        solver=solver,
        clamp_zero_features=args.clamp_zero_features,
        checkpoint_dir=out,
        resume=args.resume,
        on_epoch=on_epoch,
    )
    (out / "train.log").write_text("".join(line + "\n" for line in log_lines))
    n_banks = sum(len(b) for b in state.banks.values())
    print(f"checkpoints={n_banks} dir={out}")
    return 0


def _load_banks(checkpoint_dir: str | Path) -> dict[int, list]:
    files = sorted(Path(checkpoint_dir).glob("*.prdt"))
    if not files:
        raise ConfigError(f"no checkpoints found in {checkpoint_dir}")
    banks: dict[int, list] = {}
    for path in files:
        protos, _ = formats.read_prdt(path)
        banks.setdefault(protos.scale_id, []).append(protos)
    for scale in banks:
        banks[scale].sort(key=lambda b: b.alpha)
    return banks


def cmd_infer(args) -> int:
    manifest = formats.load_manifest(args.manifest)
    entries = manifest.split("test")
    if not entries:
        raise ConfigError("manifest has no 'test' samples")
    banks = _load_banks(args.checkpoints)
    out = Path(args.out)
    (out / "maps").mkdir(parents=True, exist_ok=True)

    def score_one(entry: formats.SampleEntry):
        per_scale = []
        for scale in sorted(entry.grids):
            if scale not in banks:
                raise ConfigError(f"no checkpoint for scale {scale} (sample {entry.id})")
            grid = formats.read_fgrd(manifest.resolve(entry.grids[scale]))
            for bank in banks[scale]:
                if (bank.height, bank.width, bank.dim) != (grid.height, grid.width, grid.dim):
                    raise ConfigError(
                        f"checkpoint scale {scale} layout "
                        f"{(bank.height, bank.width, bank.dim)} does not match grid "
                        f"{(grid.height, grid.width, grid.dim)} (sample {entry.id})"
                    )
            fields = [
                score_grid(grid, bank, clamp_zero_features=args.clamp_zero_features)[0]
                for bank in banks[scale]
            ]
            per_scale.append(fields)
        return aggregate(per_scale, args.h0, args.w0, smooth_sigma=args.smooth_sigma)

    if args.workers > 1:
        with ThreadPoolExecutor(max_workers=args.workers) as pool:
            maps = list(pool.map(score_one, entries))
    else:
        maps = [score_one(e) for e in entries]

    table = []
    for entry, amap in zip(entries, maps):
        formats.write_amap(out / "maps" / f"{entry.id}.amap", amap)
        table.append(f"{entry.id}\t{_fmt(amap.image_score)}")
    (out / "scores.tsv").write_text("".join(line + "\n" for line in table))
    print(f"maps={len(maps)} dir={out}")
    return 0


def _find_map(maps_dir: Path, sample_id: str) -> Path:
    for candidate in (maps_dir / f"{sample_id}.amap", maps_dir / "maps" / f"{sample_id}.amap"):
        if candidate.is_file():
            return candidate
    raise ConfigError(f"no anomaly map for sample {sample_id} under {maps_dir}")


def cmd_eval(args) -> int:
    manifest = formats.load_manifest(args.manifest)
    entries = manifest.split("test")
    if not entries:
        raise ConfigError("manifest has no 'test' samples")
    maps_dir = Path(args.maps)
    samples = []
    for entry in entries:
        amap = formats.read_amap(_find_map(maps_dir, entry.id))
        mask = formats.read_amsk(manifest.resolve(entry.mask)) if entry.mask else None
        samples.append(
            {
                "id": entry.id,
                "scores": amap.scores,
                "mask": mask,
                "tag": entry.tag,
                "saturation": entry.saturation,
            }
        )
    report = evaluate_samples(samples, fpr_cap=args.fpr_cap)
    text = report_text(report, category=manifest.category)
    kv = report_kv_lines(report, category=manifest.category)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.txt").write_text(text + "\n")
    (out / "report.kv").write_text("".join(line + "\n" for line in kv))
    print(text)
    return 0


def cmd_export_protos(args) -> int:
    protos, _ = formats.read_prdt(args.checkpoint)
    manifest = formats.load_manifest(args.manifest)
    entries = manifest.split("train")
    if not entries:
        raise ConfigError("manifest has no 'train' samples")
    samples = []
    for entry in entries:
        if protos.scale_id not in entry.grids:
            raise ConfigError(f"sample {entry.id} has no grid at scale {protos.scale_id}")
        samples.append((entry.id, formats.read_fgrd(manifest.resolve(entry.grids[protos.scale_id]))))
    provenance = reconstruct_prototypes(protos, samples, clamp_zero_features=args.clamp_zero_features)
    lines = ["proto\tsample_id\ti\tj\tsimilarity"]
    for idx, p in enumerate(provenance):
        lines.append(f"{idx}\t{p.sample_id}\t{p.i}\t{p.j}\t{_fmt(p.similarity)}")
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text("".join(line + "\n" for line in lines))
    print(f"protos={len(provenance)} file={out}")
    return 0


def _read_provenance(path: str | Path) -> list:
    from .score import Provenance

    lines = Path(path).read_text().splitlines()
    if not lines or lines[0].split("\t")[:4] != ["proto", "sample_id", "i", "j"]:
        raise ConfigError(f"{path}: not a prototype provenance table")
    out: list = []
    for line in lines[1:]:
        idx, sid, i, j, sim = line.split("\t")
        idx = int(idx)
        if idx != len(out):
            raise ConfigError(f"{path}: prototype indices must be dense and ordered")
        out.append(Provenance(sample_id=sid, i=int(i), j=int(j), similarity=float(sim)))
    return out


def cmd_assignments(args) -> int:
    protos, _ = formats.read_prdt(args.checkpoint)
    manifest = formats.load_manifest(args.manifest)
    entries = manifest.split("test")
    if not entries:
        raise ConfigError("manifest has no 'test' samples")
    provenance = _read_provenance(args.provenance) if args.provenance else None
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for entry in entries:
        if protos.scale_id not in entry.grids:
            raise ConfigError(f"sample {entry.id} has no grid at scale {protos.scale_id}")
        grid = formats.read_fgrd(manifest.resolve(entry.grids[protos.scale_id]))
        _, assignment = score_grid(grid, protos, clamp_zero_features=args.clamp_zero_features)
        lines = ["i\tj\tproto\trho_i\trho_j\tcost"]
        for i in range(grid.height):
            for j in range(grid.width):
                lines.append(
                    f"{i + 1}\t{j + 1}\t{assignment.proto_index[i, j]}\t"
                    f"{assignment.proto_cell[i, j, 0]}\t{assignment.proto_cell[i, j, 1]}\t"
                    f"{_fmt(assignment.cost[i, j])}"
                )
        (out / f"{entry.id}.assign.tsv").write_text("".join(line + "\n" for line in lines))
        if provenance is not None:
            recipe = restore_image_patches(assignment, provenance)
            rlines = ["i\tj\tsample_id\tsrc_i\tsrc_j"]
            for i in range(grid.height):
                for j in range(grid.width):
                    p = recipe[i][j]
                    rlines.append(f"{i + 1}\t{j + 1}\t{p.sample_id}\t{p.i}\t{p.j}")
            (out / f"{entry.id}.recipe.tsv").write_text("".join(line + "\n" for line in rlines))
    print(f"assignments={len(entries)} dir={out}")
    return 0


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="otproto",
        description="Prototype learning on feature grids with entropic optimal transport.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a seeded synthetic dataset")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--kind", required=True, choices=["logical", "structural"])
    p.add_argument("--clusters", type=int, default=4, help="cluster count (default: 4)")
    p.add_argument("--height", type=int, default=8, help="grid height (default: 8)")
    p.add_argument("--width", type=int, default=8, help="grid width (default: 8)")
    p.add_argument("--dim", type=int, default=16, help="feature dim (default: 16)")
    p.add_argument("--noise", type=float, default=0.05, help="feature noise std (default: 0.05)")
    p.add_argument("--n_train", type=int, default=20, help="training grids (default: 20)")
    p.add_argument("--n_test", type=int, default=10, help="anomalous test grids (default: 10)")
    p.add_argument("--n_test_good", type=int, default=10, help="normal test grids (default: 10)")
    p.add_argument("--seed", type=int, default=0, help="rng seed (default: 0)")
    p.add_argument("--image_height", type=int, default=64, help="mask height (default: 64)")
    p.add_argument("--image_width", type=int, default=64, help="mask width (default: 64)")
    p.add_argument("--two_scales", action="store_true", help="also emit 2x2-pooled scale-3 grids")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="learn prototype banks from the manifest's train split")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True, help="checkpoint/log directory")
    p.add_argument("--config", default=None, help="key=value config file; flags override")
    p.add_argument("--n", type=int, default=None, help="prototypes per grid cell (default: 16)")
    p.add_argument("--eta", type=float, default=None, help="EMA retention (default: 0.95)")
    p.add_argument("--alpha_local", type=float, default=None, help="local-bank spatial weight (default: 0.3)")
    p.add_argument("--epsilon", type=float, default=None, help="entropic regularization (default: 0.01)")
    p.add_argument("--max_sinkhorn_iters", type=int, default=None, help="solver iteration cap (default: 100)")
    p.add_argument("--epochs", type=int, default=None, help="training epochs (default: 50)")
    p.add_argument("--batch_size", type=int, default=None, help="grids per batch, >= n (default: 64)")
    p.add_argument("--rng_seed", type=int, default=None, help="seed for init and shuffling (default: 0)")
    p.add_argument("--init_std", type=float, default=None, help="prototype init std (default: 1.0)")
    p.add_argument("--init_mean", type=float, default=None, help="prototype init mean (default: 0.0)")
    p.add_argument("--marginal_tol", type=float, default=None, help="solver marginal tolerance (default: 1e-6)")
    p.add_argument("--log_domain", default=None, help="true/false: log-domain solver (default: true)")
    p.add_argument("--clamp_zero_features", action="store_true",
                   help="score zero-norm features as cosine 0 instead of erroring")
    p.add_argument("--resume", action="store_true", help="continue from checkpoints in --out")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("infer", help="write anomaly maps for the manifest's test split")
    p.add_argument("--manifest", required=True)
    p.add_argument("--checkpoints", required=True, help="directory of .prdt banks")
    p.add_argument("--out", required=True)
    p.add_argument("--h0", type=int, default=224, help="output map height (default: 224)")
    p.add_argument("--w0", type=int, default=224, help="output map width (default: 224)")
    p.add_argument("--workers", type=int, default=1, help="parallel scoring threads (default: 1)")
    p.add_argument("--smooth_sigma", type=float, default=0.0,
                   help="Gaussian smoothing of the final map, 0 disables (default: 0)")
    p.add_argument("--clamp_zero_features", action="store_true",
                   help="score zero-norm features as cosine 0 instead of erroring")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("eval", help="score anomaly maps against the manifest's ground truth")
    p.add_argument("--manifest", required=True)
    p.add_argument("--maps", required=True, help="directory produced by infer")
    p.add_argument("--out", required=True, help="report directory")
    p.add_argument("--fpr_cap", type=float, default=0.05, help="sPRO FPR cap (default: 0.05)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("export-protos", help="per-prototype best-matching training patch")
    p.add_argument("--manifest", required=True)
    p.add_argument("--checkpoint", required=True, help="one .prdt bank")
    p.add_argument("--out", required=True, help="output TSV file")
    p.add_argument("--clamp_zero_features", action="store_true")
    p.set_defaults(func=cmd_export_protos)

    p = sub.add_parser("assignments", help="per-cell argmin prototype tables for test samples")
    p.add_argument("--manifest", required=True)
    p.add_argument("--checkpoint", required=True, help="one .prdt bank")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--provenance", default=None,
                   help="TSV from export-protos; also emit patch-montage recipes")
    p.add_argument("--clamp_zero_features", action="store_true")
    p.set_defaults(func=cmd_assignments)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse already printed usage/help
        return int(exc.code or 0)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except OTProtoError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


def entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entry()
