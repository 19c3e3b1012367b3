"""Command-line entry point: ``adensemble prepare|inspect|train|evaluate``.

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

from . import architectures as A
from . import data as D
from . import evaluation as E
from . import trainer as TR
from .archive import WeightArchive
from .errors import (AdEnsembleError, CheckpointError, ConfigError, DataError, DegenerateTestError,
                     IngestionError, NotFoundError, ShapeError, TransferError)

log = logging.getLogger("adensemble")

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE = 0, 1, 2

# The 32x32 fixture trains with a larger step and smaller batches so the
# batchnorm moving averages (momentum 0.99) settle within 30 epochs.
TOY_TRAIN = TR.TrainConfig(learning_rate=1e-3, batch_size=8, epochs=30)

PREPARED_NAME = "prepared.warc"
VGG19_ENTRY = "vgg19/block2_conv1"


class UsageError(AdEnsembleError):
    pass


@dataclass
class RunConfig:
    data: str | None = None
    scenario: str = "smote"
    smote_order: str = "paper"
    split: str = "nested"
    model: str = "ir-brainnet"
    seed: int = 42
    out: str = "runs"
    flops_convention: str = "default"
    toy: bool = False
    cache: str | None = None
    limit: int | None = None
    import_vgg19: str | None = None
    import_entry: str = VGG19_ENTRY
    resume: bool = False
    k_neighbors: int = 5
    train: dict = field(default_factory=dict)

    def validate(self):
        choices = {"scenario": ("smote", "no-smote"), "smote_order": ("paper", "after-split"),
                   "split": ("nested", "flat"), "flops_convention": A.FLOP_CONVENTIONS}
        for key, allowed in choices.items():
            if getattr(self, key) not in allowed:
                raise ConfigError(f"{key} must be one of {', '.join(allowed)}; got {getattr(self, key)!r}")
        known = {f.name for f in fields(TR.TrainConfig)}
        unknown = set(self.train) - known
        if unknown:
            raise ConfigError(f"unknown train setting(s): {', '.join(sorted(unknown))}")
        self.train_config()
        if self.data is not None and not Path(self.data).is_dir():
            raise ConfigError(f"dataset root {self.data} is not a directory")
        if self.import_vgg19 is not None and not Path(self.import_vgg19).is_file():
            raise ConfigError(f"pretrained archive {self.import_vgg19} not found")
        if self.limit is not None and self.limit < 1:
            raise ConfigError("limit must be positive")

    def train_config(self) -> TR.TrainConfig:
        base = TOY_TRAIN if self.toy else TR.TrainConfig()
        return replace(base, **{"shuffle_seed": self.seed, **self.train})

    def split_spec(self) -> D.SplitSpec:
        if self.split == "flat":
            return D.SplitSpec.flat(seed=self.seed)
        return D.SplitSpec(seed=self.seed)

    def cache_path(self) -> Path:
        return Path(self.cache) if self.cache else Path(self.out) / PREPARED_NAME


def _load_config(args) -> RunConfig:
    cfg = {}
    if getattr(args, "config", None):
        try:
            cfg = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {args.config}: {exc}") from None
        if not isinstance(cfg, dict):
            raise ConfigError("config file must hold a JSON object")
        unknown = set(cfg) - {f.name for f in fields(RunConfig)}
        if unknown:
            raise ConfigError(f"unknown config key(s): {', '.join(sorted(unknown))}")
    rc = RunConfig(**cfg)
    for f in fields(RunConfig):
        v = getattr(args, f.name, None)
        if v is not None and f.name != "train":
            setattr(rc, f.name, v)
    overrides = {k: getattr(args, k) for k in ("epochs", "batch_size", "learning_rate")
                 if getattr(args, k, None) is not None}
    rc.train = {**rc.train, **overrides}
    rc.validate()
    return rc


def _echo_config(rc: RunConfig, name: str):
    out = Path(rc.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / name).write_text(json.dumps(asdict(rc), indent=2, sort_keys=True) + "\n")


# --------------------------------------------------------------------------
# prepare


def _load_images(rc: RunConfig) -> D.LabeledImageSet:
    if rc.toy:
        return D.make_toy_dataset(seed=rc.seed)
    if rc.data is None:
        raise ConfigError("no dataset given: pass --data <root> or --toy")
    images = D.ingest_directory(rc.data)
    if images.errors:
        print(f"warning: {len(images.errors)} file(s) could not be decoded", file=sys.stderr)
        for path, msg in images.errors:
            print(f"  {path}: {msg}", file=sys.stderr)
    if len(images) == 0:
        raise DataError("dataset is empty")
    return images


def _prepare_data(rc: RunConfig) -> D.PreparedData:
    images = _load_images(rc)
    size = A.TOY_INPUT if rc.toy else A.INPUT_SHAPE[0]
    prepared = D.prepare(images, size, rc.scenario, rc.smote_order, rc.split_spec(),
                         D.SmoteConfig(rc.k_neighbors, rc.seed))
    prepared.meta["toy"] = rc.toy
    prepared.meta["before"] = images.histogram()
    return prepared


def _fmt_hist(h: dict) -> str:
    return "  ".join(f"{k}={v}" for k, v in h.items()) + f"  total={sum(h.values())}"


def cmd_prepare(rc: RunConfig) -> int:
    prepared = _prepare_data(rc)
    _echo_config(rc, "config.prepare.json")
    path = rc.cache_path()
    path.parent.mkdir(parents=True, exist_ok=True)
    prepared.to_archive().save(path)
    report = {"before": prepared.meta["before"], "after": prepared.histogram(),
              "train": prepared.histogram("train"), "val": prepared.histogram("val"),
              "test": prepared.histogram("test"), "synthetic": int(prepared.synthetic.sum())}
    (Path(rc.out) / "histogram.json").write_text(json.dumps(report, indent=2) + "\n")
    print(f"before: {_fmt_hist(report['before'])}")
    print(f"after:  {_fmt_hist(report['after'])}")
    for part in ("train", "val", "test"):
        print(f"{part + ':':7} {_fmt_hist(report[part])}")
    print(f"wrote {path}")
    return EXIT_OK


# --------------------------------------------------------------------------
# inspect


def _inspect_reports(name: str, convention: str, toy: bool):
    if name == "ensemble":
        members = [A.flop_count(A.build_model(m, toy), convention) for m in A.MODEL_NAMES]
        return members + [A.ensemble_cost(members)]
    return [A.flop_count(A.build_model(name, toy), convention)]


def cmd_inspect(model: str, convention: str = "default", toy: bool = False, as_json: bool = False) -> int:
    if model not in A.MODEL_NAMES + ("ensemble",):
        print(f"unknown model {model!r}; available: {', '.join(A.MODEL_NAMES + ('ensemble',))}",
              file=sys.stderr)
        return EXIT_USAGE
    reports = _inspect_reports(model, convention, toy)
    if as_json:
        print(json.dumps([r.to_dict() for r in reports], indent=2))
        return EXIT_OK
    for r in reports:
        print(f"== {r.model} (FLOPs convention: {r.convention})")
        if r.model != "Ensemble":
            print(f"{'layer':<14}{'kind':<11}{'output':>16}{'params':>12}{'FLOPs':>16}")
            for row in r.per_layer:
                shape = "x".join(map(str, row["output_shape"]))
                print(f"{row['name']:<14}{row['kind']:<11}{shape:>16}{row['params']:>12,}{row['flops']:>16,}")
        print(f"total params:     {r.total_params:,}")
        print(f"trainable params: {r.trainable_params:,}")
        print(f"FLOPs:            {r.flops:,} ({r.gflops:.4f} GFLOPs)")
        print(f"memory:           {r.memory_bytes:,} bytes ({r.memory_mib:.2f} MiB)")
    return EXIT_OK


# --------------------------------------------------------------------------
# train


def _get_prepared(rc: RunConfig) -> D.PreparedData:
    path = rc.cache_path()
    if path.is_file():
        return D.PreparedData.from_archive(WeightArchive.load(path))
    if rc.data is None and not rc.toy:
        raise ConfigError(f"no prepared cache at {path}; run `prepare` first or pass --data/--toy")
    return _prepare_data(rc)


def _train_one(rc: RunConfig, model: str, prepared: D.PreparedData) -> None:
    cfg = rc.train_config()
    g = A.kaiming_init(A.build_model(model, rc.toy), rc.seed)
    if tuple(prepared.X.shape[1:]) != tuple(g.input_shape):
        raise ShapeError(f"prepared images {prepared.X.shape[1:]} do not fit {g.name} "
                         f"input {g.input_shape}; was the cache prepared with --toy?")
    if rc.import_vgg19:
        if model != "ir-brainnet":
            raise ConfigError("--import-vgg19 applies to ir-brainnet only")
        g = A.import_pretrained_layer(g, "conv2", WeightArchive.load(rc.import_vgg19), rc.import_entry)
        n = A.layer_param_count(g, "conv2")
        print(f"{n:,} values imported into conv2 from {rc.import_vgg19}")

    out = Path(rc.out)
    ckpt = out / f"{model}.ckpt.warc"
    state = None
    if rc.resume and ckpt.is_file():
        g, state = TR.load_checkpoint(ckpt, g)
        print(f"resuming {model} from epoch {state.epoch if state else 0}")

    train = prepared.subset("train")
    if rc.limit is not None:
        train = (train[0][:rc.limit], train[1][:rc.limit])
    val = prepared.subset("val")

    def on_epoch_end(graph, st):
        TR.save_checkpoint(graph, st, ckpt, cfg)
        r = st.history.rows[-1]
        print(f"[{model}] epoch {r['epoch']}/{cfg.epochs} loss {r['train_loss']:.4f} "
              f"acc {r['train_acc']:.4f} val_loss {r['val_loss']:.4f} val_acc {r['val_acc']:.4f} "
              f"lr {r['lr']:.1e}", flush=True)

    g, history = TR.fit(g, train, val, cfg, state, on_epoch_end)
    if cfg.epochs == 0:
        TR.save_checkpoint(g, state, ckpt, cfg)
    (out / f"{model}_history.csv").write_text(history.to_csv())
    print(f"wrote {ckpt} and {out / f'{model}_history.csv'}")


def cmd_train(rc: RunConfig) -> int:
    prepared = _get_prepared(rc)
    _echo_config(rc, "config.train.json")
    models = A.MODEL_NAMES if rc.model == "both" else (rc.model,)
    for m in models:
        if m not in A.MODEL_NAMES:
            raise ConfigError(f"unknown model {m!r}; available: {', '.join(A.MODEL_NAMES)}, both")
    for m in models:
        _train_one(rc, m, prepared)
    return EXIT_OK


# --------------------------------------------------------------------------
# evaluate


def cmd_evaluate(rc: RunConfig, checkpoints) -> int:
    if not checkpoints:
        raise ConfigError("evaluate needs at least one checkpoint")
    prepared = _get_prepared(rc)
    _echo_config(rc, "config.evaluate.json")
    X, Y = prepared.subset("test")
    y_true = Y.argmax(axis=1)
    names = prepared.class_names

    members = []
    for path in checkpoints:
        try:
            g, _ = TR.load_checkpoint(path)
        except CheckpointError as exc:
            raise ConfigError(str(exc)) from None
        if tuple(X.shape[1:]) != tuple(g.input_shape):
            raise ConfigError(f"{path}: graph input {g.input_shape} does not match test images {X.shape[1:]}")
        probs = A.predict(g, X)
        cost = A.flop_count(g, rc.flops_convention)
        members.append((g.name, probs, cost))

    reports = [E.evaluate_predictions(p, y_true, name, names, cost.to_dict() | {"per_layer": None})
               for name, p, cost in members]
    comparisons = []
    if len(members) >= 2:
        ens = E.ensemble_average([E.PredictionMatrix(p, n) for n, p, _ in members])
        ens_cost = A.ensemble_cost([c for _, _, c in members])
        reports.append(E.evaluate_predictions(ens.probs, y_true, "Ensemble", names,
                                              ens_cost.to_dict() | {"per_layer": None}))
        if len(members) == 2:
            ens_correct = (ens.probs.argmax(1) == y_true).astype(float)
            for name, p, _ in members:
                member_correct = (p.argmax(1) == y_true).astype(float)
                row = {"a": "Ensemble", "b": name, "pairing": "per-sample correctness"}
                try:
                    row["W"], row["p_value"] = E.wilcoxon_signed_rank(ens_correct, member_correct)
                except DegenerateTestError as exc:
                    row["W"], row["p_value"], row["note"] = None, None, str(exc)
                comparisons.append(row)

    out = Path(rc.out)
    out.mkdir(parents=True, exist_ok=True)
    written = E.write_report(reports, out, comparisons)
    for r in reports:
        d = r.to_dict()
        auc = f"{d['auc']:.4f}" if d["auc"] is not None else "n/a"
        print(f"{d['model']:<18} acc {d['accuracy']:.4f}  P {d['macro_precision']:.4f}  "
              f"R {d['macro_recall']:.4f}  F1 {d['macro_f1']:.4f}  AUC {auc}")
    for c in comparisons:
        p = "n/a" if c["p_value"] is None else f"{c['p_value']:.3g}"
        print(f"wilcoxon {c['a']} vs {c['b']}: W={c['W']} p={p}")
    print("wrote " + ", ".join(str(p) for p in written))
    return EXIT_OK


# --------------------------------------------------------------------------
# argument parsing


def build_parser() -> argparse.ArgumentParser:
    shared = argparse.ArgumentParser(add_help=False)
    shared.add_argument("--config", help="JSON run configuration; flags override its values")
    shared.add_argument("--seed", type=int)
    shared.add_argument("--out", help="output directory")
    shared.add_argument("--scenario", choices=("smote", "no-smote"))
    shared.add_argument("--smote-order", dest="smote_order", choices=("paper", "after-split"))
    shared.add_argument("--split", choices=("nested", "flat"))
    shared.add_argument("--flops-convention", dest="flops_convention", choices=A.FLOP_CONVENTIONS)
    shared.add_argument("--toy", action="store_const", const=True,
                        help="use the bundled 32x32 synthetic fixture and scaled-down models")
    shared.add_argument("--data", help="dataset root: <root>/<class>/*.ppm")
    shared.add_argument("--cache", help="prepared tensor archive (default <out>/prepared.warc)")
    shared.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="adensemble", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("prepare", parents=[shared], help="ingest, resize, SMOTE and split a dataset")
    sp.add_argument("--k-neighbors", dest="k_neighbors", type=int)

    si = sub.add_parser("inspect", parents=[shared], help="print parameter, FLOPs and memory figures")
    si.add_argument("model_name", metavar="MODEL")
    si.add_argument("--json", action="store_true")

    st = sub.add_parser("train", parents=[shared], help="train a model and write a checkpoint")
    st.add_argument("--model", help="ir-brainnet, modified-demnet or both")
    st.add_argument("--epochs", type=int)
    st.add_argument("--batch-size", dest="batch_size", type=int)
    st.add_argument("--lr", dest="learning_rate", type=float)
    st.add_argument("--limit", type=int, help="train on the first N training samples only")
    st.add_argument("--import-vgg19", dest="import_vgg19", metavar="ARCHIVE")
    st.add_argument("--import-entry", dest="import_entry")
    st.add_argument("--resume", action="store_const", const=True)

    se = sub.add_parser("evaluate", parents=[shared], help="score checkpoints and their ensemble")
    se.add_argument("checkpoints", nargs="+")
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "inspect":
            toy = bool(args.toy)
            convention = args.flops_convention or "default"
            if args.config:
                rc = _load_config(args)
                toy, convention = rc.toy, rc.flops_convention
            return cmd_inspect(args.model_name, convention, toy, args.json)
        rc = _load_config(args)
        if args.command == "prepare":
            return cmd_prepare(rc)
        if args.command == "train":
            return cmd_train(rc)
        return cmd_evaluate(rc, args.checkpoints)
    except (ConfigError, UsageError, IngestionError, DataError, NotFoundError, TransferError,
            ShapeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (AdEnsembleError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
