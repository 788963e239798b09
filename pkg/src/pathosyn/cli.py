"""``pathosyn`` command line: gen-data, train, synthesize, evaluate.

Exit codes: 0 success, 2 usage/config error, 3 data error, 4 numerical failure.
The log level comes from ``PATHOSYN_LOG_LEVEL`` (default INFO).

A run config file (YAML or JSON) may hold up to three sections::

    toy:      ToyParams fields          (gen-data)
    train:    TrainConfig fields, with nested loss_weights, substrate_weights,
              schedule, substrate_net, noise_net mappings   (train)
    sampler:  SamplerConfig fields      (synthesize)

Unknown sections or keys are rejected. Explicit flags override the file.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
from dataclasses import asdict, fields
from pathlib import Path

import numpy as np
import torch

from . import __version__, evalkit, toyworld, trainer
from .core import recompose, smooth_mask
from .diffusion import SamplerConfig, sample_deviation
from .substrate import estimate_substrate

log = logging.getLogger("pathosyn")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4
CONFIG_SECTIONS = ("toy", "train", "sampler")
SYNTH_MANIFEST = "synth_manifest.json"
SYNTH_FORMAT_VERSION = 1
DEFAULT_SUBJECTS = 250


class UsageError(Exception):
    pass


# --- config handling ------------------------------------------------------

def load_config_file(path) -> dict:
    import yaml

    path = Path(path)
    if not path.is_file():
        raise UsageError(f"config file not found: {path}")
    text = path.read_text(encoding="utf-8")
    try:
        data = json.loads(text) if path.suffix == ".json" else yaml.safe_load(text)
    except (json.JSONDecodeError, yaml.YAMLError) as exc:
        raise UsageError(f"cannot parse config {path}: {exc}") from exc
    data = data or {}
    if not isinstance(data, dict):
        raise UsageError(f"config {path} must be a mapping of sections")
    unknown = sorted(set(data) - set(CONFIG_SECTIONS))
    if unknown:
        raise UsageError(f"unknown config section(s): {', '.join(unknown)} (allowed: {', '.join(CONFIG_SECTIONS)})")
    for name, section in data.items():
        if section is not None and not isinstance(section, dict):
            raise UsageError(f"config section {name!r} must be a mapping")
    return {k: v or {} for k, v in data.items()}


def _check_keys(cls, section: dict, where: str) -> None:
    unknown = sorted(set(section) - {f.name for f in fields(cls)})
    if unknown:
        raise UsageError(f"unknown key(s) in {where}: {', '.join(unknown)}")


def resolve_toy(section: dict, resolution=None, seed=None) -> toyworld.ToyParams:
    _check_keys(toyworld.ToyParams, section, "toy")
    section = dict(section)
    if seed is not None:
        section["seed"] = seed
    res = resolution if resolution is not None else section.pop("resolution", 64)
    section.pop("resolution", None)
    try:
        return toyworld.ToyParams.for_resolution(res, **section)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid toy parameters: {exc}") from exc


def resolve_train(section: dict) -> trainer.TrainConfig:
    try:
        return trainer.TrainConfig.from_dict(section)
    except KeyError as exc:
        raise UsageError(exc.args[0]) from exc
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid train config: {exc}") from exc


def resolve_sampler(section: dict, **overrides) -> SamplerConfig:
    _check_keys(SamplerConfig, section, "sampler")
    merged = {**section, **{k: v for k, v in overrides.items() if v is not None}}
    try:
        return SamplerConfig(**merged)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid sampler config: {exc}") from exc


def code_version() -> dict:
    """Package version plus a digest of the package sources."""
    h = hashlib.sha256()
    for p in sorted(Path(__file__).parent.glob("*.py")):
        h.update(p.name.encode())
        h.update(p.read_bytes())
    return {"version": __version__, "source_sha256": h.hexdigest()}


def _write_json(path: Path, payload) -> None:
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")


# --- synthesis --------------------------------------------------------------

def synthesize_subjects(state: trainer.TrainState, records, sampler: SamplerConfig, n_samples: int,
                        chunk: int = 32) -> list[dict]:
    """Substrate, blend map and ``n_samples`` sampled deviations/recompositions per record."""
    cfg = state.config
    dtype = cfg.dtype
    for r in records:
        if not r.m.any():
            raise ValueError(f"empty mask: subject {r.id} has no lesion to synthesize")
    state.sub_net.eval()
    state.eps_net.eval()
    results = []
    with torch.no_grad():
        for r in records:
            x = torch.as_tensor(r.x.astype(np.float64), dtype=dtype)
            m = torch.as_tensor(r.m, dtype=dtype)
            x_sub = estimate_substrate(state.sub_net, x, m)
            S = torch.as_tensor(smooth_mask(r.m, cfg.sigma_blend), dtype=dtype)
            r_hats = []
            for start in range(0, n_samples, chunk):
                ks = list(range(start, min(start + chunk, n_samples)))
                B = len(ks)
                r_hats.append(sample_deviation(
                    state.eps_net, x_sub.expand(B, -1, -1), m.expand(B, -1, -1), state.schedule, sampler,
                    subject_ids=[r.id] * B, sample_index=ks,
                ))
            r_hat = torch.cat(r_hats)
            x_hat = recompose(x_sub.expand_as(r_hat), r_hat, S.expand_as(r_hat))
            results.append({
                "id": r.id, "m": r.m, "x_sub": x_sub.numpy(), "S": S.numpy(),
                "r_hat": r_hat.numpy(), "x_hat": x_hat.numpy(),
            })
    return results


def _preview(path: Path, a: np.ndarray) -> None:
    from PIL import Image

    img = np.round(np.clip(a, 0.0, 1.0) * 255.0).astype(np.uint8)
    Image.fromarray(img, mode="L").save(path)


def write_synthesis(out_dir, results, meta: dict) -> dict:
    """Raw little-endian f32 arrays, PNG previews and a checksummed manifest."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    checksums, subjects = {}, {}

    def put(name, array, dtype):
        (out / name).write_bytes(np.ascontiguousarray(array, dtype=np.dtype(dtype)).tobytes())
        checksums[name] = hashlib.sha256((out / name).read_bytes()).hexdigest()

    resolution = None
    for res in results:
        sid = res["id"]
        resolution = res["x_sub"].shape[-1]
        put(f"{sid}.xsub.f32", res["x_sub"], "<f4")
        put(f"{sid}.S.f32", res["S"], "<f4")
        put(f"{sid}.m.u8", res["m"], "u1")
        _preview(out / f"{sid}.xsub.png", res["x_sub"])
        for k in range(len(res["r_hat"])):
            put(f"{sid}.s{k:03d}.rhat.f32", res["r_hat"][k], "<f4")
            put(f"{sid}.s{k:03d}.xhat.f32", res["x_hat"][k], "<f4")
            _preview(out / f"{sid}.s{k:03d}.xhat.png", res["x_hat"][k])
            # deviations are signed: shown as 0.5 + r / 2
            _preview(out / f"{sid}.s{k:03d}.rhat.png", 0.5 + 0.5 * res["r_hat"][k])
        subjects[sid] = {"samples": len(res["r_hat"])}
    manifest = {
        "format_version": SYNTH_FORMAT_VERSION,
        "kind": "synthesis",
        "resolution": resolution,
        "subjects": subjects,
        "checksums": dict(sorted(checksums.items())),
        **meta,
    }
    _write_json(out / SYNTH_MANIFEST, manifest)
    return manifest


def read_synthesis(directory) -> tuple[dict, list[dict]]:
    d = Path(directory)
    path = d / SYNTH_MANIFEST
    if not path.is_file():
        raise toyworld.DatasetError(f"no synthesis manifest in {d}")
    try:
        manifest = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise toyworld.DatasetError(f"corrupt synthesis manifest {path}: {exc}") from exc
    if manifest.get("format_version") != SYNTH_FORMAT_VERSION:
        raise toyworld.DatasetError(f"unsupported synthesis format_version {manifest.get('format_version')!r}")
    res = manifest["resolution"]

    def get(name, dtype):
        p = d / name
        if not p.is_file():
            raise toyworld.DatasetError(f"missing synthesis file {p}")
        raw = p.read_bytes()
        if hashlib.sha256(raw).hexdigest() != manifest["checksums"].get(name):
            raise toyworld.DatasetError(f"checksum mismatch for {p}")
        return np.frombuffer(raw, dtype=np.dtype(dtype)).reshape(res, res).astype(np.dtype(dtype).newbyteorder("="))

    entries = []
    for sid, info in sorted(manifest["subjects"].items()):
        k = info["samples"]
        entries.append({
            "id": sid,
            "x_sub": get(f"{sid}.xsub.f32", "<f4"),
            "S": get(f"{sid}.S.f32", "<f4"),
            "m": get(f"{sid}.m.u8", "u1"),
            "r_hat": np.stack([get(f"{sid}.s{j:03d}.rhat.f32", "<f4") for j in range(k)]) if k else None,
            "x_hat": np.stack([get(f"{sid}.s{j:03d}.xhat.f32", "<f4") for j in range(k)]) if k else None,
        })
    return manifest, entries


# --- evaluation -------------------------------------------------------------

def lesion_features(encoder, images, masks, crop: int) -> np.ndarray:
    return np.stack([encoder(evalkit.lesion_crop(im, mk, crop)) for im, mk in zip(images, masks)])


def evaluate(dataset: toyworld.Dataset, entries, encoder, *, bootstrap_n: int = 1000, seed: int = 0,
             crop: int | None = None) -> tuple[dict, list, list]:
    """Evaluation suite of synthesized lesions against the real test split.

    Returns (report, roc_rows, ecdf_rows).
    """
    entries = [e for e in entries if e["x_hat"] is not None and len(e["x_hat"])]
    if not entries:
        raise toyworld.DatasetError("synthesis directory holds no samples")
    train_ids = set(dataset.manifest["splits"]["train"])
    leaked = sorted(e["id"] for e in entries if e["id"] in train_ids)
    if leaked:
        raise toyworld.DatasetError(f"split leakage: synthesized subjects from the train split: {leaked}")
    unknown = sorted(e["id"] for e in entries if e["id"] not in dataset)
    if unknown:
        raise toyworld.DatasetError(f"synthesized subjects not in the dataset: {unknown}")

    real = [r for r in dataset.split("test") if r.has_lesion]
    if not real:
        raise toyworld.DatasetError("test split has no lesion-bearing subjects")
    res = real[0].x.shape[-1]
    crop = crop or res // 2
    real_f = lesion_features(encoder, [r.x for r in real], [r.m for r in real], crop)
    synth_imgs = [xh for e in entries for xh in e["x_hat"]]
    synth_masks = [e["m"] for e in entries for _ in e["x_hat"]]
    synth_f = lesion_features(encoder, synth_imgs, synth_masks, crop)

    disc = evalkit.discriminability(real_f, synth_f, bootstrap_n, seed,
                                    real_groups=[r.id for r in real],
                                    synth_groups=[e["id"] for e in entries for _ in e["x_hat"]])
    fpr, tpr = evalkit.roc_points(disc.real_scores, disc.synth_scores)
    curve = evalkit.feature_distance_ecdf(real_f, synth_f)
    dists = evalkit.nearest_distances(real_f, synth_f)

    def glcm_summary(images, masks):
        stats = [evalkit.glcm_stats(evalkit.lesion_crop(im, mk, crop), 32, (0, 1)) for im, mk in zip(images, masks)]
        return {k: evalkit._summary([s[k] for s in stats]) for k in ("contrast", "homogeneity")}

    pairs = [(e["x_sub"], rh) for e in entries for rh in e["r_hat"]]
    report = {
        "discriminability_auc": {
            "mean": disc.auc,
            "sd": float(np.std(disc.bootstrap, ddof=1)) if len(disc.bootstrap) > 1 else 0.0,
            "n": len(real_f) + len(synth_f),
            "n_real": len(real_f),
            "n_synth": len(synth_f),
            "ci": [disc.ci_low, disc.ci_high],
        },
        "nearest_real_distance": {**evalkit._summary(dists), "median": float(np.median(dists))},
        "glcm_real": glcm_summary([r.x for r in real], [r.m for r in real]),
        "glcm_synth": glcm_summary(synth_imgs, synth_masks),
    }
    if len(pairs) >= 2:
        report["disentanglement"] = evalkit.disentanglement_report(encoder, pairs, seed=seed)
    roc_rows = list(zip(fpr.tolist(), tpr.tolist()))
    return report, roc_rows, curve.rows()


def make_encoder(spec: str):
    if spec == "builtin":
        return evalkit.StatsEncoder()
    if spec.startswith("external:"):
        return evalkit.load_external_encoder(spec[len("external:"):])
    raise UsageError(f"--encoder must be 'builtin' or 'external:PATH', got {spec!r}")


# --- subcommands ------------------------------------------------------------

def _prepare_out(path: Path, force: bool, what: str) -> None:
    if path.exists() and not path.is_dir():
        raise UsageError(f"{what} {path} exists and is not a directory")
    if path.is_dir() and any(path.iterdir()) and not force:
        raise UsageError(f"{what} {path} is not empty (use --force to overwrite)")
    path.mkdir(parents=True, exist_ok=True)


def cmd_gen_data(args) -> int:
    sections = load_config_file(args.config) if args.config else {}
    params = resolve_toy(sections.get("toy", {}), args.resolution, args.seed)
    out = Path(args.out)
    _prepare_out(out, args.force, "output directory")
    if args.force:
        for p in out.iterdir():
            if p.is_file() and (p.name == toyworld.MANIFEST or p.suffix in (".f32", ".u8")):
                p.unlink()
    if args.subjects < 0:
        raise UsageError("--subjects must be nonnegative")
    if args.subjects == 0:
        log.warning("generating an empty dataset (0 subjects)")
    try:
        records = toyworld.generate_corpus(params, args.subjects, args.lesion_free_frac)
    except RuntimeError as exc:
        raise UsageError(f"toy parameters are infeasible: {exc}") from exc
    manifest = toyworld.write_dataset(
        records, out, resolution=params.resolution, split_seed=params.seed,
        extra={"toy": params.to_dict(), "subjects": args.subjects,
               "lesion_free_frac": args.lesion_free_frac, "code": code_version()},
    )
    counts = {k: len(v) for k, v in manifest["splits"].items()}
    print(f"wrote {len(records)} subjects to {out}: train {counts['train']}, val {counts['val']}, test {counts['test']}")
    return EXIT_OK


def cmd_train(args) -> int:
    sections = load_config_file(args.config) if args.config else {}
    config = resolve_train(sections.get("train", {}))
    dataset = toyworld.read_dataset(args.data)
    out = Path(args.out)
    state = None
    if args.resume:
        state = trainer.load_checkpoint(args.resume, expected_config=config)
        out.mkdir(parents=True, exist_ok=True)
        log.info("resuming from %s at step %d", args.resume, state.step)
    else:
        _prepare_out(out, args.force, "output directory")
    _write_json(out / "resolved_config.json", {
        "train": config.to_dict(), "config_digest": config.digest(), "data": str(Path(args.data).resolve()),
        "code": code_version(),
    })
    state = trainer.train(config, dataset, out, state=state)
    rows = trainer.read_metrics(out / "metrics.csv")
    last = rows[-1] if rows else None
    summary = f"trained {state.step} steps ({state.skipped} lesion-free items skipped); final checkpoint {out / 'final.ckpt'}"
    if last:
        summary += f"; last total {float(last['total']):.5g}"
    print(summary)
    return EXIT_OK


def cmd_synthesize(args) -> int:
    sections = load_config_file(args.config) if args.config else {}
    sampler = resolve_sampler(sections.get("sampler", {}), kind=args.sampler, ddim_steps=args.steps,
                              ddim_eta=args.eta, seed=args.seed)
    if args.samples < 1:
        raise UsageError("--samples must be at least 1")
    dataset = toyworld.read_dataset(args.data)
    missing = [s for s in args.subject if s not in dataset]
    if missing:
        raise toyworld.DatasetError(f"unknown subject(s): {', '.join(missing)}")
    records = [dataset[s] for s in args.subject]
    state = trainer.load_checkpoint(args.ckpt)
    if state.config.noise_net.resolution != dataset.manifest["resolution"]:
        raise toyworld.DatasetError(
            f"checkpoint resolution {state.config.noise_net.resolution} does not match dataset "
            f"resolution {dataset.manifest['resolution']}")
    out = Path(args.out)
    _prepare_out(out, args.force, "output directory")
    try:
        results = synthesize_subjects(state, records, sampler, args.samples)
    except ValueError as exc:
        if "empty mask" in str(exc):
            raise toyworld.DatasetError(str(exc)) from exc
        raise
    meta = {
        "dataset": str(Path(args.data).resolve()),
        "checkpoint": {"path": str(Path(args.ckpt).resolve()), "step": state.step,
                       "config_digest": state.config.digest()},
        "sampler": asdict(sampler),
        "code": code_version(),
    }
    write_synthesis(out, results, meta)
    print(f"wrote {args.samples} sample(s) for {len(records)} subject(s) to {out}")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    encoder = make_encoder(args.encoder)
    dataset = toyworld.read_dataset(args.data)
    manifest, entries = read_synthesis(args.synth)
    try:
        report, roc_rows, ecdf_rows = evaluate(dataset, entries, encoder, bootstrap_n=args.bootstrap,
                                               seed=args.seed, crop=args.crop)
    except ValueError as exc:
        raise toyworld.DatasetError(f"cannot evaluate: {exc}") from exc
    report["config"] = {"encoder": args.encoder, "bootstrap": args.bootstrap, "seed": args.seed,
                        "crop": args.crop, "data": str(Path(args.data).resolve()),
                        "synth": str(Path(args.synth).resolve()), "code": code_version()}
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    _write_json(out, report)
    stem = out.with_suffix("")
    with open(f"{stem}.roc.csv", "w", encoding="utf-8", newline="\n") as fh:
        fh.write("fpr,tpr\n")
        fh.writelines(f"{a!r},{b!r}\n" for a, b in roc_rows)
    with open(f"{stem}.ecdf.csv", "w", encoding="utf-8", newline="\n") as fh:
        fh.write("distance,fraction\n")
        fh.writelines(f"{a!r},{b!r}\n" for a, b in ecdf_rows)
    auc = report["discriminability_auc"]
    print(f"AUC {auc['mean']:.4f} [{auc['ci'][0]:.4f}, {auc['ci'][1]:.4f}] "
          f"({auc['n_real']} real, {auc['n_synth']} synthetic); report {out}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="pathosyn", description="Lesion synthesis by substrate/deviation diffusion.")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate a toy dataset")
    g.add_argument("--out", required=True)
    g.add_argument("--subjects", type=int, default=DEFAULT_SUBJECTS)
    g.add_argument("--resolution", type=int, default=None)
    g.add_argument("--seed", type=int, default=None)
    g.add_argument("--lesion-free-frac", type=float, default=0.0)
    g.add_argument("--config")
    g.add_argument("--force", action="store_true")
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="joint training of substrate and noise networks")
    t.add_argument("--data", required=True)
    t.add_argument("--config")
    t.add_argument("--out", required=True)
    t.add_argument("--resume", metavar="CKPT")
    t.add_argument("--force", action="store_true")
    t.set_defaults(func=cmd_train)

    s = sub.add_parser("synthesize", help="sample lesions for dataset subjects")
    s.add_argument("--data", required=True)
    s.add_argument("--ckpt", required=True)
    s.add_argument("--subject", required=True, action="append", help="subject id (repeatable)")
    s.add_argument("--samples", type=int, default=1)
    s.add_argument("--sampler", choices=("ancestral", "ddim"), default=None)
    s.add_argument("--steps", type=int, default=None)
    s.add_argument("--eta", type=float, default=None)
    s.add_argument("--seed", type=int, default=None)
    s.add_argument("--config")
    s.add_argument("--out", required=True)
    s.add_argument("--force", action="store_true")
    s.set_defaults(func=cmd_synthesize)

    e = sub.add_parser("evaluate", help="evaluate synthesized lesions against real test subjects")
    e.add_argument("--data", required=True)
    e.add_argument("--synth", required=True)
    e.add_argument("--out", required=True)
    e.add_argument("--encoder", default="builtin")
    e.add_argument("--bootstrap", type=int, default=1000)
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--crop", type=int, default=None)
    e.set_defaults(func=cmd_evaluate)
    return p


def main(argv=None) -> int:
    logging.basicConfig(level=os.environ.get("PATHOSYN_LOG_LEVEL", "INFO").upper(),
                        format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"pathosyn {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (toyworld.DatasetError, trainer.CheckpointError, FileNotFoundError) as exc:
        print(f"pathosyn {args.command}: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except FloatingPointError as exc:
        print(f"pathosyn {args.command}: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
