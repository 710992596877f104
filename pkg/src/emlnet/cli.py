"""Command-line entry point: ``emlnet <subcommand> ...``.

Subcommands
-----------
eval           score saliency maps against densities and fixations
train-encoder  encoder-stage training of one backbone
train-decoder  decoder-stage training over frozen encoder checkpoints
predict        write ``<id>_sal.png`` maps for a directory of images
synth          generate a synthetic dataset
report         render metric tables from JSON reports

Settings come from built-in defaults, then ``--config FILE`` (``key = value``
lines, ``#`` comments), then ``--set key=value`` pairs, then the dedicated
flags.  Later sources win.  Every run writes ``run.json`` with the resolved
settings.

Exit codes: 0 success, 2 input or contract error, 3 numerical failure.
"""

import argparse
import csv
import json
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

from threadpoolctl import threadpool_limits

from emlnet import __version__
from emlnet.core import NonFiniteGradient, NonFiniteLoss, SaliencyError
from emlnet.dataio import (
    FixationRecord,
    IoFailure,
    fixations_to_binary,
    generate_synthetic,
    load_dataset,
    load_image,
    load_manifest,
    load_map_image,
    pad_to_ratio,
    read_fixations,
    resize_image,
    resize_map,
    save_map_image,
    unpad,
)
from emlnet.metrics import LAYOUTS, MetricConfig, MetricReport, evaluate_all, mean_report, render_table
from emlnet.micronet import SgdConfig, TinyBackbone
from emlnet.pipeline import (
    EmlSystem,
    ModelCheckpoint,
    TrainConfig,
    encoder_loss,
    encoder_predict,
    train_decoder,
    train_encoder,
)

EXIT_OK = 0
EXIT_CONTRACT = 2
EXIT_NUMERIC = 3

IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg", ".bmp")


class UsageError(Exception):
    """Bad configuration or inputs; reported and mapped to exit code 2."""


# ---------------------------------------------------------------------------
# settings
# ---------------------------------------------------------------------------


def _bool(text):
    if isinstance(text, bool):
        return text
    low = str(text).strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _int_list(text):
    if isinstance(text, (list, tuple)):
        return [int(v) for v in text]
    return [int(v) for v in str(text).replace(" ", "").split(",") if v]


def _schedule(text):
    """``"5:0.1,8:0.1"`` -> ``[[5, 0.1], [8, 0.1]]`` (0-based epochs)."""
    if isinstance(text, (list, tuple)):
        return [[int(e), float(m)] for e, m in text]
    if str(text).strip().lower() in ("", "none"):
        return []
    out = []
    for item in str(text).replace(" ", "").split(","):
        if not item:
            continue
        epoch, mult = item.split(":")
        out.append([int(epoch), float(mult)])
    return out


def _ratio(text):
    if text in (None, "", "none"):
        return None
    w, h = str(text).split(":")
    w, h = int(w), int(h)
    if w <= 0 or h <= 0:
        raise ValueError("ratio parts must be positive")
    return [w, h]


TRAIN_KEYS = {
    "seed": (int, 0),
    "input_w": (int, 640),
    "input_h": (int, 480),
    "batch_size": (int, 8),
    "epochs": (int, 10),
    "learning_rate": (float, 0.1),
    "momentum": (float, 0.9),
    "weight_decay": (float, 1e-4),
    "schedule": (_schedule, "5:0.1"),
    "epsilon": (float, 1e-7),
    "sigma": (float, None),
}

SCHEMAS = {
    "eval": {
        "seed": (int, 0),
        "epsilon": (float, 1e-7),
        "auc_thresholds": (int, 10),
        "borji_splits": (int, 100),
        "emd_downsample": (int, 32),
        "layout": (str, "validation"),
        "workers": (int, 1),
    },
    "train-encoder": dict(
        TRAIN_KEYS,
        channels=(_int_list, "16,32,64"),
        convs_per_stage=(int, 2),
        kernel=(int, 3),
        update_backbone=(_bool, True),
        workers=(int, 1),
    ),
    "train-decoder": dict(
        TRAIN_KEYS,
        batch_size=(int, 32),
        epochs=(int, 5),
        schedule=(_schedule, "2:0.1"),
        bias=(_bool, False),
        workers=(int, 1),
    ),
    "predict": {
        "seed": (int, 0),
        "pad_ratio": (_ratio, None),
        "restore_size": (_bool, False),
        "bits": (int, 16),
        "workers": (int, 1),
    },
    "synth": {
        "seed": (int, 0),
        "count": (int, 10),
        "width": (int, 64),
        "height": (int, 48),
        "sigma": (float, None),
        "blobs": (int, 2),
        "distractors": (int, 4),
        "fixations_per_blob": (int, 48),
        "split": (str, "train"),
        "workers": (int, 1),
    },
    "report": {
        "layout": (str, "validation"),
        "digits": (int, 3),
        "workers": (int, 1),
    },
}


def read_config_file(path):
    """Parse ``key = value`` lines in file order (later duplicates win)."""
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as err:
        raise UsageError(f"cannot read config {path}: {err}") from err
    pairs = []
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{lineno}: expected 'key = value'")
        key, value = line.split("=", 1)
        pairs.append((key.strip().replace("-", "_"), value.strip()))
    return pairs


def resolve_settings(command, args):
    """Defaults < config file < ``--set`` < dedicated flags."""
    schema = SCHEMAS[command]
    raw = {k: default for k, (_, default) in schema.items()}
    sources = []
    if args.config:
        sources.extend(read_config_file(args.config))
    for item in args.set or []:
        if "=" not in item:
            raise UsageError(f"--set expects key=value, got {item!r}")
        key, value = item.split("=", 1)
        sources.append((key.strip().replace("-", "_"), value.strip()))
    for key in schema:
        value = getattr(args, key, None)
        if value is not None:
            sources.append((key, value))
    for key, value in sources:
        if key not in schema:
            raise UsageError(f"unknown setting {key!r} for {command}")
        raw[key] = value
    settings = {}
    for key, (convert, _) in schema.items():
        value = raw[key]
        try:
            settings[key] = None if value is None else convert(value)
        except (TypeError, ValueError) as err:
            raise UsageError(f"bad value for {key}: {value!r} ({err})") from err
    if settings["workers"] < 1:
        raise UsageError("workers must be >= 1")
    return settings


def write_run_record(out, command, settings, extra=None):
    doc = {"subcommand": command, "version": __version__, "seed": settings.get("seed"), "config": settings}
    doc.update(extra or {})
    (out / "run.json").write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _out_dir(path):
    out = Path(path)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as err:
        raise UsageError(f"cannot create output directory {out}: {err}") from err
    return out


def _pool_map(fn, items, workers):
    """``map`` in input order, optionally across processes."""
    if workers == 1 or len(items) < 2:
        return [fn(item) for item in items]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


# ---------------------------------------------------------------------------
# eval
# ---------------------------------------------------------------------------


def _stem_id(path):
    stem = Path(path).stem
    return stem[: -len("_sal")] if stem.endswith("_sal") else stem


def _index(directory, suffixes):
    directory = Path(directory)
    if not directory.is_dir():
        raise UsageError(f"not a directory: {directory}")
    found = {}
    for p in sorted(directory.iterdir()):
        if p.suffix.lower() in suffixes:
            key = _stem_id(p)
            if key in found:
                raise UsageError(f"two files map to id {key!r}: {found[key].name}, {p.name}")
            found[key] = p
    return found


def _load_fixation_map(path, shape):
    h, w = shape
    return fixations_to_binary(FixationRecord(Path(path).stem, read_fixations(path), w, h))


def _eval_one(job):
    image_id, pred_path, gt_path, fix_path, others, cfg = job
    P = load_map_image(pred_path)
    Q = load_map_image(gt_path)
    F = _load_fixation_map(fix_path, Q.shape)
    other_F = [_load_fixation_map(p, Q.shape) for p in others]
    return evaluate_all(P, Q, F, other_F=other_F, cfg=cfg, metadata={"id": image_id})


def cmd_eval(args, settings):
    if settings["layout"] not in LAYOUTS:
        raise UsageError(f"unknown layout {settings['layout']!r}; choose from {sorted(LAYOUTS)}")
    preds = _index(args.pred_dir, IMAGE_SUFFIXES)
    gts = _index(args.gt_dir, IMAGE_SUFFIXES)
    fixes = _index(args.fixation_dir, (".txt",))
    ids = sorted(set(preds) | set(gts) | set(fixes))
    if not ids:
        raise UsageError("no saliency maps found")
    missing = [(i, [n for n, d in (("prediction", preds), ("density", gts), ("fixations", fixes)) if i not in d]) for i in ids]
    missing = [(i, m) for i, m in missing if m]
    if missing:
        for image_id, what in missing:
            print(f"missing {', '.join(what)} for {image_id}", file=sys.stderr)
        raise UsageError(f"{len(missing)} image(s) lack a complete prediction/density/fixation triple")

    cfg = MetricConfig(
        epsilon=settings["epsilon"],
        auc_thresholds=settings["auc_thresholds"],
        borji_splits=settings["borji_splits"],
        emd_downsample=settings["emd_downsample"],
        rng_seed=settings["seed"],
    )
    # shuffled-AUC negatives come from every other image's fixations
    jobs = [(i, preds[i], gts[i], fixes[i], [fixes[j] for j in ids if j != i], cfg) for i in ids]
    reports = _pool_map(_eval_one, jobs, settings["workers"])

    out = _out_dir(args.out)
    per_image = out / "per_image"
    per_image.mkdir(exist_ok=True)
    for image_id, report in zip(ids, reports):
        (per_image / f"{image_id}.json").write_text(report.to_json(), encoding="utf-8")
    # worker count is an execution detail and must not change the report
    agg = mean_report(reports, metadata={"config": {k: v for k, v in settings.items() if k != "workers"}})
    (out / "report.json").write_text(agg.to_json(), encoding="utf-8")
    (out / "report.tsv").write_text(agg.to_tsv(), encoding="utf-8")
    table = render_table([("mean", agg)], settings["layout"])
    (out / "report.txt").write_text(table, encoding="utf-8")
    write_run_record(out, "eval", settings, {"ids": ids})
    print(table, end="")
    return EXIT_OK


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------


def _train_config(settings):
    return TrainConfig(
        input_w=settings["input_w"],
        input_h=settings["input_h"],
        batch_size=settings["batch_size"],
        epochs=settings["epochs"],
        sgd=SgdConfig(
            learning_rate=settings["learning_rate"],
            momentum=settings["momentum"],
            weight_decay=settings["weight_decay"],
            schedule=tuple(tuple(s) for s in settings["schedule"]),
        ),
        seed=settings["seed"],
        epsilon=settings["epsilon"],
        update_backbone=settings.get("update_backbone", True),
    )


def _load_data(path, settings):
    manifest = load_manifest(path)
    if settings.get("sigma") is not None:
        manifest.sigma = settings["sigma"]
    data = load_dataset(manifest)
    if not data:
        raise UsageError(f"dataset {path} is empty")
    return data


def write_loss_curve(path, curve, sgd):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["epoch", "learning_rate", "loss"])
        for epoch, loss in enumerate(curve):
            writer.writerow([epoch + 1, f"{sgd.lr_at(epoch):.10g}", f"{loss:.10f}"])


def _log(args):
    if args.verbose:
        return lambda msg: print(msg, file=sys.stderr)
    return None


def _train(args, settings, stage, run):
    out = _out_dir(args.out)
    cfg = _train_config(settings)
    name = f"{stage}.emlk"
    try:
        ckpt = run(cfg)
    except NonFiniteLoss as err:
        if err.checkpoint is not None:
            err.checkpoint.save(out / f"{stage}.aborted.emlk")
            write_loss_curve(out / "loss_curve.csv", err.checkpoint.metadata.get("loss_curve", []), cfg.sgd)
        write_run_record(out, f"train-{stage}", settings, {"aborted": str(err)})
        raise
    ckpt.save(out / name)
    write_loss_curve(out / "loss_curve.csv", ckpt.metadata["loss_curve"], cfg.sgd)
    extra = {"checkpoint": name, "digest": ckpt.digest()}
    return out, ckpt, extra


def cmd_train_encoder(args, settings):
    data = _load_data(args.manifest, settings)
    backbone = TinyBackbone(
        channels=tuple(settings["channels"]),
        convs_per_stage=settings["convs_per_stage"],
        kernel=settings["kernel"],
    )
    out, ckpt, extra = _train(args, settings, "encoder", lambda cfg: train_encoder(backbone, data, cfg, log=_log(args)))
    if args.val:
        extra["val_loss"] = encoder_loss(ckpt, _load_data(args.val, settings), settings["epsilon"])
    write_run_record(out, "train-encoder", settings, extra)
    return EXIT_OK


def _load_encoders(paths):
    if not paths:
        raise UsageError("encoder stage missing: pass at least one --encoder checkpoint (run train-encoder first)")
    encoders = []
    for p in paths:
        if not Path(p).is_file():
            raise UsageError(f"encoder stage missing: no encoder checkpoint at {p} (run train-encoder first)")
        encoders.append(ModelCheckpoint.load(p))
    return encoders


def cmd_train_decoder(args, settings):
    encoders = _load_encoders(args.encoder)
    data = _load_data(args.manifest, settings)

    def run(cfg):
        return train_decoder(encoders, data, cfg, bias=settings["bias"], log=_log(args))

    out, ckpt, extra = _train(args, settings, "decoder", run)
    extra["encoders"] = [str(p) for p in args.encoder]
    if args.val:
        system = EmlSystem(encoders, ckpt)
        extra["val_loss"] = system.loss(_load_data(args.val, settings), settings["epsilon"])
    write_run_record(out, "train-decoder", settings, extra)
    return EXIT_OK


# ---------------------------------------------------------------------------
# predict
# ---------------------------------------------------------------------------


def _predictor(encoder_paths, decoder_path):
    encoders = _load_encoders(encoder_paths)
    if decoder_path is None:
        if len(encoders) != 1:
            raise UsageError("several encoders need a --decoder checkpoint to be combined")
        ckpt = encoders[0]
        w, h = ckpt.architecture["input"]
        return (lambda x: encoder_predict(ckpt, x[None])[0]), (w, h)
    if not Path(decoder_path).is_file():
        raise UsageError(f"decoder stage missing: no decoder checkpoint at {decoder_path}")
    system = EmlSystem(encoders, ModelCheckpoint.load(decoder_path))
    return system.predict, (system.width, system.height)


def predict_map(predict_fn, input_size, image, pad_ratio=None, restore_size=False):
    """Run ``predict_fn`` on one ``(3, H, W)`` image.

    The image is optionally zero-padded to ``pad_ratio``, then resized to
    the model input.  With ``restore_size`` the map is resized back and the
    padding cropped, so it matches the source resolution.
    """
    geom = None
    if pad_ratio is not None:
        image, geom = pad_to_ratio(image, tuple(pad_ratio))
    ph, pw = image.shape[1:]
    w, h = input_size
    P = predict_fn(resize_image(image, w, h) if (pw, ph) != (w, h) else image)
    if restore_size:
        P = resize_map(P, pw, ph)
        if geom is not None:
            P = unpad(P, geom)
    return P


def _predict_one(job):
    image_path, out_path, encoder_paths, decoder_path, settings = job
    predict_fn, size = _predictor(encoder_paths, decoder_path)
    P = predict_map(predict_fn, size, load_image(image_path), settings["pad_ratio"], settings["restore_size"])
    save_map_image(P, out_path, bits=settings["bits"])
    return out_path.name


def cmd_predict(args, settings):
    images = _index(args.image_dir, IMAGE_SUFFIXES)
    if not images:
        raise UsageError(f"no images in {args.image_dir}")
    _predictor(args.encoder, args.decoder)  # fail early on bad checkpoints
    out = _out_dir(args.out)
    ids = sorted(images)
    jobs = [(images[i], out / f"{i}_sal.png", args.encoder, args.decoder, settings) for i in ids]
    if settings["workers"] == 1:
        predict_fn, size = _predictor(args.encoder, args.decoder)
        for image_path, out_path, *_ in jobs:
            P = predict_map(predict_fn, size, load_image(image_path), settings["pad_ratio"], settings["restore_size"])
            save_map_image(P, out_path, bits=settings["bits"])
    else:
        _pool_map(_predict_one, jobs, settings["workers"])
    write_run_record(
        out,
        "predict",
        settings,
        {"ids": ids, "encoders": [str(p) for p in args.encoder], "decoder": args.decoder},
    )
    return EXIT_OK


# ---------------------------------------------------------------------------
# synth and report
# ---------------------------------------------------------------------------


def cmd_synth(args, settings):
    out = _out_dir(args.out)
    manifest = generate_synthetic(
        out,
        settings["count"],
        settings["width"],
        settings["height"],
        blobs_per_image=settings["blobs"],
        seed=settings["seed"],
        sigma=settings["sigma"],
        split=settings["split"],
        fixations_per_blob=settings["fixations_per_blob"],
        distractors=settings["distractors"],
    )
    write_run_record(out, "synth", settings, {"entries": len(manifest.entries), "sigma": manifest.sigma})
    return EXIT_OK


def _report_label(path, report):
    """Explicit label, else the file stem, else (for ``report.json``) its directory."""
    if report.metadata.get("label"):
        return str(report.metadata["label"])
    path = Path(path).resolve()
    return path.parent.name if path.stem == "report" else path.stem


def cmd_report(args, settings):
    if settings["layout"] not in LAYOUTS:
        raise UsageError(f"unknown layout {settings['layout']!r}; choose from {sorted(LAYOUTS)}")
    rows = []
    for path in args.reports:
        try:
            report = MetricReport.from_json(Path(path).read_text(encoding="utf-8"))
        except OSError as err:
            raise UsageError(f"cannot read report {path}: {err}") from err
        except (ValueError, KeyError) as err:
            raise UsageError(f"{path} is not a metric report: {err}") from err
        rows.append((_report_label(path, report), report))
    table = render_table(rows, settings["layout"], settings["digits"])
    if args.out:
        out = _out_dir(args.out)
        (out / "table.txt").write_text(table, encoding="utf-8")
        write_run_record(out, "report", settings, {"reports": [str(p) for p in args.reports]})
    print(table, end="")
    return EXIT_OK


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------


def _common(p, out_required=True):
    p.add_argument("--config", help="key = value settings file")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one setting (repeatable)")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--workers", type=int, default=None, help="processes / BLAS threads to use")
    p.add_argument("--out", required=out_required, help="output directory")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser():
    parser = argparse.ArgumentParser(prog="emlnet", description="Saliency metrics and piecewise EML training.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("eval", help="score saliency maps")
    p.add_argument("pred_dir")
    p.add_argument("gt_dir", help="ground-truth density maps (grayscale images)")
    p.add_argument("fixation_dir", help="fixation lists, one x<TAB>y file per image")
    _common(p)
    p.add_argument("--epsilon", type=float, default=None)
    p.add_argument("--layout", default=None, choices=sorted(LAYOUTS))

    for name, stage in (("train-encoder", "encoder"), ("train-decoder", "decoder")):
        p = sub.add_parser(name, help=f"{stage}-stage training")
        p.add_argument("manifest", help="dataset directory or manifest.json")
        _common(p)
        p.add_argument("--val", help="validation manifest; its loss goes into run.json")
        p.add_argument("--epsilon", type=float, default=None)
        p.add_argument("--sigma", type=float, default=None, help="blur for entries without a density map")
        p.add_argument("--epochs", type=int, default=None)
        p.add_argument("--learning-rate", dest="learning_rate", type=float, default=None)
        p.add_argument("--batch-size", dest="batch_size", type=int, default=None)
        if stage == "decoder":
            p.add_argument("--encoder", action="append", default=[], help="encoder checkpoint (repeatable)")

    p = sub.add_parser("predict", help="write saliency maps for a directory of images")
    p.add_argument("image_dir")
    _common(p)
    p.add_argument("--encoder", action="append", default=[], help="encoder checkpoint (repeatable)")
    p.add_argument("--decoder", help="decoder checkpoint; omit for encoder-only prediction")
    p.add_argument("--pad-ratio", dest="pad_ratio", default=None, help="zero-pad to W:H first, e.g. 4:3")
    p.add_argument("--restore-size", dest="restore_size", action="store_const", const=True, default=None)

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    _common(p)
    p.add_argument("--count", type=int, default=None)
    p.add_argument("--size", default=None, help="WIDTHxHEIGHT, e.g. 64x48")
    p.add_argument("--sigma", type=float, default=None)
    p.add_argument("--split", default=None)

    p = sub.add_parser("report", help="render metric tables from JSON reports")
    p.add_argument("reports", nargs="+")
    _common(p, out_required=False)
    p.add_argument("--layout", default=None, choices=sorted(LAYOUTS))
    p.add_argument("--digits", type=int, default=None)
    return parser


COMMANDS = {
    "eval": cmd_eval,
    "train-encoder": cmd_train_encoder,
    "train-decoder": cmd_train_decoder,
    "predict": cmd_predict,
    "synth": cmd_synth,
    "report": cmd_report,
}


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        if getattr(args, "size", None):
            try:
                args.width, args.height = (int(v) for v in args.size.lower().split("x"))
            except ValueError:
                raise UsageError(f"--size expects WIDTHxHEIGHT, got {args.size!r}") from None
        settings = resolve_settings(args.command, args)
        with threadpool_limits(limits=settings["workers"]):
            return COMMANDS[args.command](args, settings)
    except UsageError as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_CONTRACT
    except (NonFiniteLoss, NonFiniteGradient) as err:
        print(f"numerical failure: {err}", file=sys.stderr)
        return EXIT_NUMERIC
    except (SaliencyError, IoFailure, ValueError) as err:
        print(f"error: {type(err).__name__}: {err}", file=sys.stderr)
        return EXIT_CONTRACT


if __name__ == "__main__":
    sys.exit(main())
