"""``axlstm`` command line: pretrain, extract, probe, score, selftest, bench, inspect.

Exit codes: 0 success, 1 validation error, 2 runtime failure, 3 selftest failure.
Every command writes its outputs plus ``manifest.json`` under ``--out``.
"""

from __future__ import annotations

import argparse
import json
import os
import platform
import sys
from pathlib import Path

import numpy as np

from .. import __version__

EXIT_OK, EXIT_VALIDATION, EXIT_RUNTIME, EXIT_SELFTEST = 0, 1, 2, 3
TEST_BUILD_ENV = "AXLSTM_TEST_BUILD"
SUPPORTED_EF = (2, 3, 4)


class ValidationError(ValueError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse would exit with 2; flag problems are validation errors
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_VALIDATION)


def _int_list(text: str) -> list[int]:
    try:
        return [int(v) for v in text.split(",") if v]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _float_list(text: str) -> list[float]:
    try:
        return [float(v) for v in text.split(",") if v]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _add_model_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--variant", choices=["tiny", "small", "base"], default="tiny")
    p.add_argument("--ef", type=int, help="expansion factor E_f (2-4 unless --allow-custom)")
    p.add_argument("--allow-custom", action="store_true", help="permit E_f outside 2-4")
    p.add_argument("--d-m", type=int, help="override model width")
    p.add_argument("--depth", type=int, help="override number of blocks")
    p.add_argument("--heads", type=int)
    p.add_argument("--gate", choices=["exponential", "sigmoid"])
    p.add_argument("--flip", choices=["none", "alternating"])


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="axlstm", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"axlstm {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(p):
        p.add_argument("--out", default="axlstm-out", help="output directory (created if needed)")
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--config", help="JSON file whose keys override flags")

    p = sub.add_parser("pretrain", help="masked-reconstruction pretraining")
    common(p)
    _add_model_flags(p)
    p.add_argument("--patch", default="4x16", help="patch size TxF")
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--synthetic", type=int, metavar="N", help="generate N synthetic clips")
    src.add_argument("--data", help="directory of .wav files")
    p.add_argument("--steps", type=int)
    p.add_argument("--epochs", type=int, default=100)
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--peak-lr", type=float, default=3e-4)
    p.add_argument("--weight-decay", type=float, default=0.05)
    p.add_argument("--warmup-epochs", type=int, default=10)
    p.add_argument("--mask-ratio", type=float, default=0.5)
    p.add_argument("--crop-seconds", type=float, default=2.0)
    p.add_argument("--quiet", action="store_true")

    p = sub.add_parser("extract", help="clip-level features from a checkpoint")
    common(p)
    p.add_argument("--checkpoint", required=True)
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--synthetic", type=int, metavar="N")
    src.add_argument("--data")
    p.add_argument("--pooling", choices=["mean", "concat"], default="mean")
    p.add_argument("--expect-d-m", type=int, help="reject checkpoints of another width")

    p = sub.add_parser("probe", help="train MLP probes on extracted features")
    common(p)
    p.add_argument("--features", required=True)
    p.add_argument("--labels", help="CSV clip_id,label (defaults to labels stored with the features)")
    p.add_argument("--task", default="task")
    p.add_argument("--model", default="model")
    p.add_argument("--multilabel", action="store_true")
    p.add_argument("--seeds", type=int, default=10)
    p.add_argument("--lrs", type=_float_list, default=[1e-4, 1e-3])
    p.add_argument("--epochs", type=_int_list, default=[20, 50, 100])
    p.add_argument("--hidden", type=int, default=1024)

    p = sub.add_parser("score", help="aggregated normalized scores from results CSVs")
    common(p)
    p.add_argument("--results", nargs="+", required=True)
    p.add_argument("--model", help="print only this model")

    p = sub.add_parser("selftest", help="run the invariant suite")
    common(p)
    p.add_argument("--only", action="append", help="family to run (repeatable)")
    p.add_argument("--list", action="store_true", help="list families and exit")
    p.add_argument("--sabotage", choices=["stabilizer"],
                   help=f"inject a known fault (requires {TEST_BUILD_ENV}=1)")

    p = sub.add_parser("bench", help="recurrent vs parallel forward timings")
    common(p)
    p.add_argument("--lengths", type=_int_list, default=[125, 250, 500])
    p.add_argument("--d", type=int, default=192)
    p.add_argument("--runs", type=int, default=20)

    p = sub.add_parser("inspect", help="parameter counts and reconstruction dumps")
    common(p)
    _add_model_flags(p)
    p.add_argument("--checkpoint")
    p.add_argument("--patch", default="4x16")
    p.add_argument("--recon", action="store_true", help="dump original/masked/reconstructed spectrograms")
    p.add_argument("--wav", help="clip for --recon (default: one synthetic clip)")
    return parser


# -- helpers ------------------------------------------------------------------------

def _apply_config(args: argparse.Namespace, parser: argparse.ArgumentParser) -> None:
    if not getattr(args, "config", None):
        return
    try:
        with open(args.config) as fh:
            overrides = json.load(fh)
    except (OSError, json.JSONDecodeError) as err:
        raise ValidationError(f"--config {args.config}: {err}") from err
    if not isinstance(overrides, dict):
        raise ValidationError("--config must hold a JSON object")
    for key, value in overrides.items():
        attr = key.replace("-", "_")
        if attr in ("command", "config") or not hasattr(args, attr):
            raise ValidationError(f"--config: unknown key {key!r} for {args.command}")
        setattr(args, attr, value)


def _encoder_config(args):
    from ..encoder import ConfigError, EncoderConfig
    overrides = {}
    if args.ef is not None:
        if args.ef not in SUPPORTED_EF and not args.allow_custom:
            raise ValidationError(f"--ef {args.ef} is outside the supported grid {SUPPORTED_EF}; pass --allow-custom")
        overrides["expansion"] = args.ef
    for flag, key in (("d_m", "d_m"), ("depth", "depth"), ("heads", "heads"), ("gate", "gate_type"),
                      ("flip", "flip_policy")):
        if getattr(args, flag) is not None:
            overrides[key] = getattr(args, flag)
    try:
        return EncoderConfig.from_variant(args.variant, **overrides)
    except (ConfigError, TypeError) as err:
        raise ValidationError(str(err)) from err


def _patch(text: str):
    from ..specfeat import PatchConfig
    try:
        return PatchConfig.parse(text)
    except ValueError as err:
        raise ValidationError(str(err)) from err


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def write_manifest(out: Path, args: argparse.Namespace, config: dict, outputs: list[str]) -> None:
    flags = {k: v for k, v in vars(args).items() if k not in ("command",)}
    manifest = {
        "command": args.command,
        "version": __version__,
        "seed": getattr(args, "seed", None),
        "flags": flags,
        "config": config,
        "outputs": outputs,
        "python": platform.python_version(),
        "numpy": np.__version__,
    }
    with open(out / "manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True, default=str)
        fh.write("\n")


def _dataset(args):
    from ..pretrain import load_audio_dir, synth_dataset
    if args.synthetic is not None:
        if args.synthetic < 1:
            raise ValidationError("--synthetic needs at least one clip")
        return synth_dataset(args.synthetic, args.seed)
    if not os.path.isdir(args.data):
        raise ValidationError(f"--data {args.data} is not a directory")
    return load_audio_dir(args.data)


# -- commands ---------------------------------------------------------------------

def cmd_pretrain(args) -> int:
    from ..pretrain import PretrainConfig, save_checkpoint, train, write_loss_csv
    enc = _encoder_config(args)
    _patch(args.patch)
    try:
        cfg = PretrainConfig(epochs=args.epochs, batch_size=args.batch_size, weight_decay=args.weight_decay,
                             warmup_epochs=args.warmup_epochs, peak_lr=args.peak_lr, seed=args.seed,
                             mask_ratio=args.mask_ratio, crop_seconds=args.crop_seconds, steps=args.steps,
                             patch=args.patch)
    except ValueError as err:
        raise ValidationError(str(err)) from err
    if args.data is not None and not os.path.isdir(args.data):
        raise ValidationError(f"--data {args.data} is not a directory")
    out = _out_dir(args)
    data = _dataset(args)

    def report(rec):
        if not args.quiet and (rec.step % 10 == 0):
            print(f"step {rec.step:5d}  lr {rec.lr:.3e}  loss {rec.loss:.4f}", flush=True)

    result = train(cfg, data, enc, on_step=report)
    save_checkpoint(out / "checkpoint.axls", result.checkpoint)
    write_loss_csv(out / "loss.csv", result.trace)
    write_manifest(out, args, {"encoder": enc.to_dict(), "pretrain": cfg.to_dict()},
                   ["checkpoint.axls", "loss.csv"])
    L = result.losses
    k = min(20, len(L))
    print(f"done: {len(L)} steps in {result.seconds:.1f} s; first-{k} mean {L[:k].mean():.4f}, "
          f"last-{k} mean {L[-k:].mean():.4f}")
    return EXIT_OK


def cmd_extract(args) -> int:
    from ..evalkit import FrozenEncoder, extract_dataset, save_features
    from ..pretrain import CheckpointError
    expect = {"d_m": args.expect_d_m} if args.expect_d_m is not None else None
    try:
        model = FrozenEncoder.load(args.checkpoint, expect)
    except (OSError, CheckpointError) as err:
        raise ValidationError(f"{args.checkpoint}: {err}") from err
    out = _out_dir(args)
    data = _dataset(args)
    ids = [c.clip_id for c in data.clips]
    feats = extract_dataset([c.waveform for c in data.clips], ids, model, args.pooling)
    meta = {"pooling": args.pooling, "encoder": model.cfg.to_dict()}
    if all(c.label >= 0 for c in data.clips):
        meta["labels"] = [int(c.label) for c in data.clips]
    save_features(out / "features.axls", ids, feats, meta)
    write_manifest(out, args, {"encoder": model.cfg.to_dict(), "pooling": args.pooling}, ["features.axls"])
    print(f"extracted {len(ids)} clips -> {feats.shape[1]}-d features")
    return EXIT_OK


def _probe_labels(args, ids: list[str], meta: dict):
    from ..evalkit import read_labels
    if args.labels:
        table = read_labels(args.labels, multilabel=args.multilabel)
        missing = [i for i in ids if i not in table]
        if missing:
            raise ValidationError(f"{args.labels}: no label for {len(missing)} clips, e.g. {missing[0]!r}")
        if args.multilabel:
            classes = sorted({c for v in table.values() for c in v})
            y = np.zeros((len(ids), len(classes)), np.int64)
            for r, i in enumerate(ids):
                for c in table[i]:
                    y[r, classes.index(c)] = 1
            return y
        classes = sorted(set(table[i] for i in ids))
        return np.array([classes.index(table[i]) for i in ids])
    if "labels" not in meta:
        raise ValidationError("features carry no labels; pass --labels")
    return np.asarray(meta["labels"])


def cmd_probe(args) -> int:
    from ..evalkit import ProbeConfig, ProbeError, ScoreTable, evaluate_task, load_features, write_results
    from ..pretrain import CheckpointError
    if args.seeds < 1:
        raise ValidationError("--seeds must be >= 1")
    try:
        ids, X, meta = load_features(args.features)
    except (OSError, CheckpointError, ValueError) as err:
        raise ValidationError(f"{args.features}: {err}") from err
    y = _probe_labels(args, ids, meta)
    cfg = ProbeConfig(hidden=args.hidden, lrs=tuple(args.lrs), epochs=tuple(args.epochs))
    try:
        res = evaluate_task(args.task, X, y, cfg, seeds=args.seeds)
    except ProbeError as err:
        raise ValidationError(str(err)) from err
    out = _out_dir(args)
    table = ScoreTable([args.model], [args.task], {(args.model, args.task): res.mean},
                       {args.task: res.metric}, {(args.model, args.task): res.ci95})
    write_results(out / "results.csv", table)
    write_manifest(out, args, {"probe": vars(cfg) | {"lrs": list(cfg.lrs), "epochs": list(cfg.epochs)},
                               "per_seed": res.per_seed}, ["results.csv"])
    print(f"{args.task}: {res.metric} {res.mean:.2f} +- {res.ci95:.2f} over {args.seeds} seeds")
    return EXIT_OK


def cmd_score(args) -> int:
    from ..evalkit import ScoreTable, ScoreTableError, all_scores, read_results
    values, metrics, ci, models, tasks = {}, {}, {}, [], []
    try:
        for path in args.results:
            t = read_results(path)
            for key, v in t.values.items():
                if key in values:
                    raise ValidationError(f"{path}: cell {key} already given by an earlier file")
                values[key] = v
            ci.update(t.ci95)
            metrics.update(t.metrics)
            models += [m for m in t.models if m not in models]
            tasks += [x for x in t.tasks if x not in tasks]
        table = ScoreTable(models, tasks, values, metrics, ci)
        scores = all_scores(table)
    except (OSError, ScoreTableError) as err:
        raise ValidationError(str(err)) from err
    if args.model and args.model not in scores:
        raise ValidationError(f"model {args.model!r} not found; have {models}")
    out = _out_dir(args)
    with open(out / "scores.csv", "w") as fh:
        fh.write("model,s\n")
        for m, s in scores.items():
            fh.write(f"{m},{s!r}\n")
    write_manifest(out, args, {"models": models, "tasks": tasks}, ["scores.csv"])
    for m, s in scores.items():
        if args.model is None or m == args.model:
            print(f"{m:<20} s(m) = {s:6.2f}")
    return EXIT_OK


def cmd_selftest(args) -> int:
    import contextlib

    from ..mlstm import sabotage
    from .selftest import FAMILIES, run_selftest
    if args.list:
        print("\n".join(FAMILIES))
        return EXIT_OK
    if args.sabotage and os.environ.get(TEST_BUILD_ENV) != "1":
        raise ValidationError(f"--sabotage is only available in test builds (set {TEST_BUILD_ENV}=1)")
    unknown = [f for f in (args.only or []) if f not in FAMILIES]
    if unknown:
        raise ValidationError(f"unknown family {unknown[0]!r}; choose from {list(FAMILIES)}")
    out = _out_dir(args)
    ctx = sabotage(args.sabotage) if args.sabotage else contextlib.nullcontext()
    with ctx:
        results = run_selftest(args.only)
    failed = [c for c in results if not c.passed]
    with open(out / "selftest.txt", "w") as fh:
        fh.write("\n".join(c.line() for c in results) + "\n")
    write_manifest(out, args, {"families": args.only or list(FAMILIES), "sabotage": args.sabotage},
                   ["selftest.txt"])
    print(f"{len(results) - len(failed)}/{len(results)} properties passed")
    return EXIT_OK if not failed else EXIT_SELFTEST


def cmd_bench(args) -> int:
    from .bench import EQUIV_TOL, run_bench, write_bench_csv
    if args.runs < 20:
        raise ValidationError("--runs must be >= 20 for a stable median")
    if not args.lengths or min(args.lengths) < 1:
        raise ValidationError("--lengths must be positive integers")
    out = _out_dir(args)
    rows = run_bench(args.lengths, args.d, args.runs, args.seed)
    write_bench_csv(out / "bench.csv", rows)
    write_manifest(out, args, {"lengths": args.lengths, "d": args.d, "runs": args.runs}, ["bench.csv"])
    for r in rows:
        print(f"{r.form:<10} L={r.L:<4} d={r.d}  median {r.median_s * 1e3:8.2f} ms  equiv {r.equiv_err:.2e}")
    bad = [r for r in rows if r.equiv_err > EQUIV_TOL]
    if bad:
        print(f"equivalence re-check failed at L={bad[0].L}: {bad[0].equiv_err:.2e} > {EQUIV_TOL}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


def inspect_report(enc, patch) -> list[str]:
    from ..encoder import REFERENCE_PARAMS_M, count_params, param_breakdown
    lines = ["module              params"]
    for name, n in param_breakdown(enc, patch, include_head=True).items():
        lines.append(f"{name:<18} {n:>9,d}")
    body = count_params(enc, patch, include_head=False)
    full = count_params(enc, patch, include_head=True)
    lines.append(f"{'total (no head)':<18} {body:>9,d}")
    lines.append(f"{'total (with head)':<18} {full:>9,d}")
    ref = REFERENCE_PARAMS_M.get((enc.variant, enc.expansion))
    is_reference_shape = ref is not None and enc.to_dict() == type(enc).from_variant(
        enc.variant, expansion=enc.expansion, gate_type=enc.gate_type, flip_policy=enc.flip_policy).to_dict()
    if is_reference_shape:
        delta = (body / 1e6 - ref) / ref * 100
        lines.append(f"{body / 1e6:.2f}M  (paper: {ref}M, {delta:+.1f}%)")
    return lines


def cmd_inspect(args) -> int:
    from ..evalkit import FrozenEncoder
    from ..pretrain import CheckpointError
    model = None
    if args.checkpoint:
        try:
            model = FrozenEncoder.load(args.checkpoint)
        except (OSError, CheckpointError) as err:
            raise ValidationError(f"{args.checkpoint}: {err}") from err
        enc, patch = model.cfg, model.patch
    else:
        enc, patch = _encoder_config(args), _patch(args.patch)
    if args.recon and model is None:
        raise ValidationError("--recon needs --checkpoint")
    out = _out_dir(args)
    lines = inspect_report(enc, patch)
    print("\n".join(lines))
    outputs = ["inspect.txt"]
    with open(out / "inspect.txt", "w") as fh:
        fh.write("\n".join(lines) + "\n")
    if args.recon:
        outputs += dump_reconstruction(model, out, args.seed, args.wav)
        print("wrote " + ", ".join(outputs[1:]))
    write_manifest(out, args, {"encoder": enc.to_dict(), "patch": str(patch)}, outputs)
    return EXIT_OK


def dump_reconstruction(model, out: Path, seed: int, wav: str | None) -> list[str]:
    """Original, masked (masked patches zeroed) and reconstructed 200x80 grids as raw float dumps."""
    from ..encoder import embed_patches, encode
    from ..numcore import Rng, no_grad
    from ..pretrain import reconstruct, synth_clip
    from ..specfeat import load_wav, logmel, patchify, sample_mask, save_spectrogram, unpatchify
    rng = Rng(seed, "inspect/recon")
    x = load_wav(wav)[0] if wav else synth_clip(rng).waveform
    x = np.pad(x, (0, max(0, 32000 - len(x))))[:32000]
    spec = logmel(x)
    raw = patchify(spec, model.patch)
    grid = model.patch.grid(*spec.shape)
    plan = sample_mask(raw.shape[0], 0.5, rng)
    with no_grad():
        seq = embed_patches(raw, plan, model.params, model.cfg, grid)
        pred = reconstruct(encode(seq.tokens, model.cfg, model.params), model.params).data
    masked = np.where(plan.masked[:, None], 0.0, raw)
    names = {"original.f32": spec,
             "masked.f32": unpatchify(masked, model.patch, grid),
             "reconstructed.f32": unpatchify(np.where(plan.masked[:, None], pred, raw), model.patch, grid)}
    for name, arr in names.items():
        save_spectrogram(out / name, arr)
    return list(names)


COMMANDS = {"pretrain": cmd_pretrain, "extract": cmd_extract, "probe": cmd_probe, "score": cmd_score,
            "selftest": cmd_selftest, "bench": cmd_bench, "inspect": cmd_inspect}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        _apply_config(args, parser)
        return COMMANDS[args.command](args)
    except ValidationError as err:
        print(f"axlstm {args.command}: error: {err}", file=sys.stderr)
        return EXIT_VALIDATION
    except KeyboardInterrupt:
        return EXIT_RUNTIME
    except Exception as err:  # noqa: BLE001 - top-level runtime failure
        print(f"axlstm {args.command}: failed: {type(err).__name__}: {err}", file=sys.stderr)
        return EXIT_RUNTIME
