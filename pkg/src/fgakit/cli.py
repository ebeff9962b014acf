"""Command-line entry point: ``fgakit <command> [--config PATH] [--out DIR] ...``.

Every command writes its artifacts into the output directory only, embeds the
config hash and seed, and exits non-zero with a JSON error record on failure.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import evalkit, experiments, guidance, models, synthdata, tensorfile
from .config import RunConfig, load_config
from .errors import ConfigError, FGAError, MissingFileError

log = logging.getLogger("fgakit")

COMMANDS = ("gen-data", "train", "attack", "eval", "transfer", "ablate", "report")


# --- serialization helpers -------------------------------------------------


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, np.generic):
        return _jsonable(obj.item())
    if isinstance(obj, float) and not np.isfinite(obj):
        return None
    return obj


def dumps(obj) -> str:
    return json.dumps(_jsonable(obj), indent=2, sort_keys=True) + "\n"


def matrix_csv(mat, row_names=None, col_names=None) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    mat = np.asarray(mat)
    cols = col_names or [str(j) for j in range(mat.shape[1])]
    w.writerow(["", *cols])
    for i, row in enumerate(mat):
        w.writerow([(row_names or [str(k) for k in range(len(mat))])[i],
                    *["" if not np.isfinite(x) else repr(float(x)) for x in row]])
    return buf.getvalue()


class Outputs:
    """Collects artifacts and writes them in one pass at the end."""

    def __init__(self, out_dir):
        self.dir = Path(out_dir)
        self.files: dict[str, bytes] = {}

    def text(self, name, content: str):
        self.files[name] = content.encode()

    def raw(self, name, content: bytes):
        self.files[name] = content

    def flush(self):
        self.dir.mkdir(parents=True, exist_ok=True)
        for name in sorted(self.files):
            (self.dir / name).write_bytes(self.files[name])
        return sorted(self.files)


def _header(cmd, cfg: RunConfig):
    return {"command": cmd, "config": cfg.echo(), "config_hash": cfg.hash(), "seed": cfg.seed}


def _dataset_files(out: Outputs, prefix, data, meta):
    out.raw(f"{prefix}.fgak", tensorfile.encode({
        "images": data.images, "labels": data.labels.astype(np.float64)}))
    side = {"class_names": data.class_names, "captions": data.caption_strings(),
            "vocab": data.vocab.to_json(), **meta}
    out.text(f"{prefix}.json", json.dumps(side, indent=1, sort_keys=True))


# --- shared loading --------------------------------------------------------


def _models(cfg: RunConfig, train):
    """Encoders from the configured checkpoint, or freshly trained on ``train``."""
    if cfg.inputs.checkpoint:
        loaded = models.from_checkpoint(models.load_checkpoint(cfg.inputs.checkpoint))
        if "image" not in loaded or "text" not in loaded:
            raise ConfigError(f"{cfg.inputs.checkpoint}: checkpoint lacks image/text encoders")
        if loaded["text"].vocab_size != len(train.vocab):
            raise ConfigError("checkpoint vocabulary size does not match the dataset")
        return loaded["image"], loaded["text"]
    img, txt, _ = experiments.train_models(cfg, train, "a")
    return img, txt


def _target_split(cfg: RunConfig, data):
    train, test = experiments.split(cfg, data)
    return train, (data if cfg.attack.split == "all" else test)


# --- commands --------------------------------------------------------------


def cmd_gen_data(cfg: RunConfig, out: Outputs):
    data = experiments.build_dataset(cfg)
    head = _header("gen-data", cfg)
    _dataset_files(out, "dataset", data, {"config_hash": head["config_hash"], "seed": cfg.seed})
    report = {**head, "num_images": len(data), "num_classes": data.num_classes,
              "vocab_size": len(data.vocab), "image_shape": list(data.images.shape[1:])}
    out.text("gen-data.json", dumps(report))


def cmd_train(cfg: RunConfig, out: Outputs):
    data = experiments.load_or_build_dataset(cfg)
    train, test = experiments.split(cfg, data)
    head = _header("train", cfg)
    img, txt, history = experiments.train_models(cfg, train, "a")
    ckpt = models.to_checkpoint({"image": img, "text": txt},
                                {"config_hash": head["config_hash"], "seed": cfg.seed})
    out.raw("model.fgak", tensorfile.encode(ckpt.tensors))
    out.text("model.fgak.json", json.dumps(ckpt.metadata, indent=1, sort_keys=True))
    epochs = {}
    for epoch, loss in history:
        epochs.setdefault(epoch, []).append(loss)
    report = {**head, "epoch_loss": [float(np.mean(v)) for _, v in sorted(epochs.items())],
              "test": experiments.evaluate(cfg, img, txt, test)["clean"]}
    out.text("train.json", dumps(report))


def cmd_attack(cfg: RunConfig, out: Outputs):
    data = experiments.load_or_build_dataset(cfg)
    train, target = _target_split(cfg, data)
    img, txt = _models(cfg, train)
    head = _header("attack", cfg)
    res = experiments.run_attack(cfg, img, txt, target, reference=train)
    adv = synthdata.PairedDataset(res["images"], res["texts"], target.labels,
                                  target.class_names, target.vocab)
    _dataset_files(out, "adversarial", adv, {"config_hash": head["config_hash"], "seed": cfg.seed})
    delta = (res["images"].astype(np.float64) - target.images).reshape(len(target), -1)
    notes = []
    if res["zero_budget"]:
        notes.append("zero budget: images unchanged")
    report = {
        **head, "method": res["method"], "image_config": res["image_config"],
        "num_examples": len(target), "notes": notes,
        "adversarial_texts": adv.caption_strings() if res["method"].startswith(("fga_t", "mfga_t"))
        else None,
        "targets": res["targets"],
        "loss": {"initial_mean": float(np.mean(res["initial_loss"])) if len(target) else None,
                 "final_mean": float(np.mean(res["final_loss"])) if len(target) else None,
                 "improved_fraction": float(np.mean(res["final_loss"] >= res["initial_loss"]))
                 if len(target) else None},
        "max_norms": {"inf": float(np.abs(delta).max(initial=0.0)),
                      "2": float(np.linalg.norm(delta, axis=1).max(initial=0.0)),
                      "1": float(np.abs(delta).sum(axis=1).max(initial=0.0))},
    }
    out.text("attack.json", dumps(report))


def cmd_eval(cfg: RunConfig, out: Outputs):
    data = experiments.load_or_build_dataset(cfg)
    train, target = _target_split(cfg, data)
    img, txt = _models(cfg, train)
    head = _header("eval", cfg)
    adv_images = adv_texts = None
    if cfg.inputs.adversarial:
        adv = synthdata.load_dataset(cfg.inputs.adversarial)
        if len(adv) != len(target) or not np.array_equal(adv.labels, target.labels):
            raise ConfigError("adversarial set does not match the evaluation split")
        adv_images, adv_texts = adv.images, adv.captions
    metrics = experiments.evaluate(cfg, img, txt, target, adv_images, adv_texts)
    report = {**head, "num_examples": len(target), "metrics": metrics}
    if adv_images is not None:
        W = guidance.prompt_guidance(txt, target.class_names, target.vocab).W
        mat, diag = evalkit.proximity_confusion(img.forward(target.images), img.forward(adv_images),
                                                W, target.labels)
        report["proximity"] = {"matrix": mat, "diagonal_mass": diag}
        out.text("proximity.csv", matrix_csv(mat, target.class_names, target.class_names))
    out.text("eval.json", dumps(report))


def cmd_transfer(cfg: RunConfig, out: Outputs):
    head = _header("transfer", cfg)
    res = experiments.transfer(cfg)
    for method, cell in res["methods"].items():
        for direction in ("TR@1", "IR@1"):
            name = f"transfer_{method}_{direction.replace('@', '')}.csv"
            out.text(name, matrix_csv(np.array(cell[direction], dtype=float), res["models"],
                                      res["models"]))
    out.text("transfer.json", dumps({**head, **res}))


def cmd_ablate(cfg: RunConfig, out: Outputs):
    head = _header("ablate", cfg)
    res = experiments.ablation(cfg)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["sweep", "epsilon_255", "steps", "TR@1", "IR@1"])
    for sweep in ("epsilon_sweep", "step_sweep"):
        for row in res[sweep]:
            m = row["metrics"]
            w.writerow([sweep, repr(row["epsilon_255"]), row["steps"], repr(m["TR@1"]), repr(m["IR@1"])])
    out.text("ablate.csv", buf.getvalue())
    out.text("ablate.json", dumps({**head, **res}))


def _flatten(obj, prefix=""):
    if isinstance(obj, dict):
        for k in sorted(obj):
            yield from _flatten(obj[k], f"{prefix}.{k}" if prefix else str(k))
    elif isinstance(obj, list) and obj and all(not isinstance(x, (dict, list)) for x in obj):
        yield prefix, json.dumps(obj)
    elif not isinstance(obj, list):
        yield prefix, obj


def cmd_report(cfg: RunConfig, out: Outputs, paths=()):
    paths = [*cfg.inputs.reports, *paths]
    if not paths:
        raise ConfigError("report needs at least one input report")
    merged = {}
    rows = []
    for p in paths:
        path = Path(p)
        if not path.exists():
            raise MissingFileError(f"no such report: {path}")
        try:
            rep = json.loads(path.read_text())
        except json.JSONDecodeError as err:
            raise ConfigError(f"{path}: line {err.lineno}: {err.msg}") from None
        key = path.stem
        merged[key] = rep
        for name, value in _flatten({k: v for k, v in rep.items() if k != "config"}):
            rows.append([key, name, json.dumps(value) if not isinstance(value, str) else value])
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["report", "key", "value"])
    w.writerows(rows)
    out.text("report.csv", buf.getvalue())
    out.text("report.json", dumps({**_header("report", cfg), "reports": merged}))


HANDLERS = {
    "gen-data": cmd_gen_data, "train": cmd_train, "attack": cmd_attack, "eval": cmd_eval,
    "transfer": cmd_transfer, "ablate": cmd_ablate, "report": cmd_report,
}


# --- entry point -----------------------------------------------------------


def build_parser():
    p = argparse.ArgumentParser(prog="fgakit", description="Feature-guidance attack toolkit.")
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        s = sub.add_parser(name)
        s.add_argument("--config", help="JSON run config")
        s.add_argument("--out", help="output directory")
        s.add_argument("--seed", type=int, help="master seed (u64)")
        s.add_argument("--threads", type=int, help="worker threads (does not change results)")
        s.add_argument("-v", "--verbose", action="store_true")
        if name == "report":
            s.add_argument("reports", nargs="*", help="report JSON files to merge")
    return p


def _error_record(err, code):
    return {"error": type(err).__name__, "message": str(err), "exit_code": code}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    out_dir = str(Path(args.out).resolve()) if args.out else None
    try:
        if args.seed is not None and not 0 <= args.seed < 2 ** 64:
            raise ConfigError("--seed must be an unsigned 64-bit integer")
        if args.threads is not None and args.threads < 1:
            raise ConfigError("--threads must be >= 1")
        cfg = load_config(args.config, {"seed": args.seed, "threads": args.threads})
        if args.out:
            cfg.out = str(Path(args.out).resolve())
        out_dir = cfg.out
        outputs = Outputs(cfg.out)
        handler = HANDLERS[args.command]
        if args.command == "report":
            handler(cfg, outputs, args.reports)
        else:
            handler(cfg, outputs)
        for name in outputs.flush():
            log.info("wrote %s", Path(cfg.out) / name)
        return 0
    except FGAError as err:
        code = err.exit_code
        record = _error_record(err, code)
    except Exception as err:  # noqa: BLE001 - last-resort record for unexpected failures
        code = 1
        record = _error_record(err, code)
    sys.stderr.write(json.dumps(record, sort_keys=True) + "\n")
    if out_dir is not None:
        try:
            Path(out_dir).mkdir(parents=True, exist_ok=True)
            (Path(out_dir) / "error.json").write_text(json.dumps(record, indent=2, sort_keys=True) + "\n")
        except OSError:
            pass
    return code


if __name__ == "__main__":
    sys.exit(main())
