"""Three-stage training: conditional diffusion, synthetic pretraining, real-data fine-tuning.

Every stage persists a checkpoint in the run directory and can be resumed from it.
All randomness is drawn from generators seeded by ``derive_seed(root_seed, purpose)``,
so a resumed stage replays exactly what an uninterrupted run would have done.
"""

from __future__ import annotations

import csv
import io
import itertools
import json
import logging
import time
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import data as D
from .autodiff import Dropout, Tensor, backward, checkpoint, make_optimizer, no_grad, ops
from .autodiff.nn import count_parameters
from .config import TOGGLES, ConfigError, RunConfig
from .diffusion import DenoiserNet, build_schedule, synthesize_dataset, train_denoiser
from .losses import ClassBalancedParams, CompositeLossState, FocalParams, SmoothingParams, composite_loss, nll, update_weights
from .metrics import evaluate as evaluate_proba
from .network import BranchConfig, Classifier, PretrainCNN, USADNet, assemble_input
from .stats import PrototypeTable, fit_prototypes

log = logging.getLogger(__name__)

LOG_FIELDS = ("stage", "epoch", "loss", "train_acc", "val_acc", "val_f1", "val_min_recall",
              "omega0", "omega1", "omega2", "note", "wall_s")
METRIC_FIELDS = ("Acc", "Pre", "Rec", "F1", "F1-wt", "G-mean", "AUC", "ECE")
CKPT = {"diffusion": "diffusion.ckpt", "pretrain": "pretrain.ckpt", "finetune": "finetune.ckpt"}


class DataHashMismatch(RuntimeError):
    pass


def derive_seed(seed: int, purpose: str) -> int:
    """Independent 63-bit seed per purpose, stable across runs and platforms."""
    ss = np.random.SeedSequence([int(seed) & 0xFFFFFFFF, zlib.crc32(purpose.encode())])
    return int(ss.generate_state(2, dtype=np.uint64)[0] >> np.uint64(1))


# -- data ------------------------------------------------------------------

@dataclass
class Prepared:
    train: list
    val: list
    test: list
    n_classes: int
    hash: str

    @property
    def channels(self) -> int:
        return self.train[0].channels

    @property
    def length(self) -> int:
        return self.train[0].length


def prepare_data(cfg: RunConfig) -> Prepared:
    """Load or build the windowed dataset and split it into train / val / test."""
    if cfg["data.prepared"]:
        root = Path(cfg["data.prepared"])
        train, val, test = (D.load_windows(root / f"{name}.csv") for name in ("train", "val", "test"))
    else:
        if cfg["data.source"] == "toy":
            samples = D.make_toy_dataset(
                n_classes=cfg["data.toy.classes"], length=cfg["data.toy.length"],
                per_class=cfg["data.toy.per_class"], seed=derive_seed(cfg.seed, "data"),
                noise=cfg["data.toy.noise"], imbalance=cfg["data.toy.imbalance"], channels=cfg["data.toy.channels"])
        else:
            schema = D.CsvSchema(channels=tuple(cfg.strings("data.channels")), header=cfg["data.header"],
                                 sample_rate=cfg["data.sample_rate"])
            rec = D.ingest_csv(cfg["data.source"], schema)
            samples = D.window(rec, D.WindowSpec(cfg["data.window"], cfg["data.step"], cfg["data.label_rule"]))
        if not samples:
            raise D.DataError("no windows produced from the data source")
        train, val, test = D.split(samples, cfg.floats("data.split"), seed=derive_seed(cfg.seed, "split"))
    if not train:
        raise D.DataError("empty training split")
    if cfg["data.normalize"]:
        norm = D.Normalizer.fit(train)
        train, val, test = norm.apply(train), norm.apply(val), norm.apply(test)
    n_classes = 1 + max(s.y for s in (*train, *val, *test))
    return Prepared(train, val, test, n_classes, D.data_hash(train))


def write_prepared(prep: Prepared, out_dir) -> None:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    for name, samples in (("train", prep.train), ("val", prep.val), ("test", prep.test)):
        D.save_windows(samples, out_dir / f"{name}.csv")
    (out_dir / "data_hash.txt").write_text(prep.hash + "\n")


# -- logs ------------------------------------------------------------------

def _fmt(value) -> str:
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    return "" if value is None else str(value)


def rows_to_csv(rows, fields, exclude=()) -> str:
    fields = [f for f in fields if f not in exclude]
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(fields)
    for row in rows:
        w.writerow([_fmt(row.get(f)) for f in fields])
    return buf.getvalue()


def read_csv_rows(path) -> list[dict]:
    with Path(path).open(newline="") as fh:
        return list(csv.DictReader(fh))


@dataclass
class RunLog:
    """Append-only per-epoch rows; epochs must increase within a stage."""

    rows: list = field(default_factory=list)

    def append(self, stage: str, epoch: int, **values) -> dict:
        previous = [r["epoch"] for r in self.rows if r["stage"] == stage]
        if previous and int(epoch) <= int(previous[-1]):
            raise ValueError(f"non-increasing epoch {epoch} in stage {stage}")
        unknown = set(values) - set(LOG_FIELDS)
        if unknown:
            raise KeyError(f"unknown log fields {sorted(unknown)}")
        row = {"stage": stage, "epoch": int(epoch), **values}
        self.rows.append(row)
        return row

    def stage_rows(self, stage: str) -> list[dict]:
        return [r for r in self.rows if r["stage"] == stage]

    def to_csv(self, exclude=()) -> str:
        return rows_to_csv(self.rows, LOG_FIELDS, exclude)


# -- models and checkpoints -----------------------------------------------

def build_classifier(cfg: RunConfig, in_channels: int, n_classes: int, seed: int) -> Classifier:
    if cfg["model.kind"] == "cnn5":
        return PretrainCNN(in_channels, n_classes, seed=seed, dropout=cfg["model.dropout"])
    bc = BranchConfig(K=cfg["model.K"], R=cfg["model.R"], kernel_sizes=tuple(cfg.ints("model.kernels")),
                      channels=cfg["model.channels"], dropout=cfg["model.dropout"],
                      spatial_attn=cfg["model.spatial_attn"], temporal_attn=cfg["model.temporal_attn"],
                      spatial_position=cfg["model.spatial_position"])
    return USADNet(in_channels, n_classes, bc, seed=seed)


def _model_spec(model) -> dict:
    if isinstance(model, DenoiserNet):
        return {"kind": "denoiser", **model.config}
    if isinstance(model, USADNet):
        return {"kind": "usad", "in_channels": model.in_channels, "n_classes": model.n_classes,
                "branch": {**model.cfg.to_dict(), "kernel_sizes": list(model.cfg.kernel_sizes)}}
    return {"kind": "cnn5", "in_channels": model.in_channels, "n_classes": model.n_classes,
            "width": model.width, "dropout": model.head.drop.rate}


def _model_from_spec(spec: dict):
    spec = dict(spec)
    kind = spec.pop("kind")
    if kind == "denoiser":
        return DenoiserNet(**spec)
    if kind == "usad":
        branch = spec.pop("branch")
        return USADNet(spec["in_channels"], spec["n_classes"], BranchConfig(**branch))
    if kind == "cnn5":
        return PretrainCNN(spec["in_channels"], spec["n_classes"], width=spec["width"], dropout=spec["dropout"])
    raise checkpoint.CheckpointError(f"unknown model kind {kind!r}")


def save_model(path, model, cfg: RunConfig | None, data_hash: str, extra: dict | None = None,
               extra_tensors: dict | None = None) -> bytes:
    """Write the container plus a readable ``<path>.cfg`` block; returns the container bytes."""
    tensors = {f"param/{k}": v for k, v in model.state_dict().items()}
    tensors.update(extra_tensors or {})
    spec = _model_spec(model)
    meta = {"kind": spec["kind"], "model": json.dumps(spec, sort_keys=True), "data_hash": data_hash,
            "config": cfg.to_text() if cfg is not None else ""}
    meta.update(extra or {})
    blob = checkpoint.save(path, tensors, meta)
    block = [f"kind = {spec['kind']}", f"data_hash = {data_hash}",
             f"parameters = {count_parameters(model)}", f"model = {meta['model']}"]
    Path(str(path) + ".cfg").write_text("\n".join(block) + "\n" + meta["config"])
    return blob


def load_model(path):
    """``(model, tensors, meta)`` from a container written by :func:`save_model`."""
    tensors, meta = checkpoint.load(path)
    if "model" not in meta:
        raise checkpoint.CheckpointError(f"{path}: no model description in container")
    model = _model_from_spec(json.loads(meta["model"]))
    model.load_state_dict({k[len("param/"):]: v for k, v in tensors.items() if k.startswith("param/")})
    model.eval()
    return model, tensors, meta


def _reseed_dropout(model, seed: int) -> None:
    for i, m in enumerate(model.modules()):
        if isinstance(m, Dropout):
            m.rng = np.random.default_rng(derive_seed(seed, f"dropout{i}"))


# -- classifier training ------------------------------------------------------

def _arrays(samples):
    X = assemble_input(np.stack([s.x0 for s in samples]), np.stack([s.f for s in samples]))
    Y = np.asarray([s.y for s in samples], dtype=np.int64)
    return X, Y


def predict_proba(model: Classifier, samples, batch: int = 256) -> np.ndarray:
    X, _ = _arrays(samples)
    was = model.training
    model.eval()
    out = []
    with no_grad():
        for lo in range(0, len(X), batch):
            out.append(ops.softmax(model(Tensor(X[lo:lo + batch])), axis=-1).data)
    model.train(was)
    return np.concatenate(out)


def evaluate_model(model: Classifier, samples, n_classes: int, ece_bins: int = 15) -> dict:
    if not samples:
        raise D.DataError("evaluation split is empty")
    y = np.asarray([s.y for s in samples])
    return evaluate_proba(predict_proba(model, samples), y, n_classes, ece_bins)


def loss_state(cfg: RunConfig, counts: dict | None = None) -> CompositeLossState:
    cb = None
    if cfg["loss.cb_beta"] > 0 and counts:
        cb = ClassBalancedParams(cfg["loss.cb_beta"], counts)
    return CompositeLossState(
        omega=tuple(cfg.floats("loss.omega")), tau=cfg["loss.tau"], temperature=cfg["loss.temperature"],
        bounds=(cfg["loss.w_min"], cfg["loss.w_max"]), smoothing=SmoothingParams(cfg["loss.epsilon"]),
        focal=FocalParams(cfg["loss.gamma"], cfg["loss.alpha"]), class_balanced=cb, adaptive=cfg["loss.adaptive"])


def train_classifier(model: Classifier, train, val, epochs: int, lr: float, batch: int, seed: int,
                     runlog: RunLog, stage: str, n_classes: int, state: CompositeLossState | None = None,
                     optimizer: str = "adam", ece_bins: int = 15, metrics_rows: list | None = None):
    """Minibatch training. ``state=None`` trains with cross-entropy; otherwise with the composite
    loss, whose weights are updated from validation accuracy after every epoch when adaptive."""
    X, Y = _arrays(train)
    rng = np.random.default_rng(derive_seed(seed, stage + "/order"))
    _reseed_dropout(model, derive_seed(seed, stage + "/dropout"))
    opt = make_optimizer(optimizer, model, lr)
    for epoch in range(epochs):
        t0 = time.perf_counter()
        model.train()
        order = rng.permutation(len(X))
        total = 0.0
        for lo in range(0, len(X), batch):
            idx = order[lo:lo + batch]
            logits = model(Tensor(X[idx]))
            if state is None:
                loss = nll(ops.log_softmax(logits, axis=-1), Y[idx])
            else:
                loss = composite_loss(logits, Y[idx], state)
            value = loss.item()
            if not np.isfinite(value):
                raise FloatingPointError(f"{stage}: non-finite loss at epoch {epoch}")
            opt.zero_grad()
            backward(loss)
            opt.step()
            total += value * len(idx)
        train_acc = float(np.mean(predict_proba(model, train).argmax(1) == Y))
        row = {"loss": total / len(X), "train_acc": train_acc}
        if val:
            m = evaluate_model(model, val, n_classes, ece_bins)
            row.update(val_acc=m["Acc"], val_f1=m["F1"],
                       val_min_recall=min(m[f"recall_{k}"] for k in range(n_classes)))
            if metrics_rows is not None:
                metrics_rows.append({"stage": stage, "split": "val", "epoch": epoch, **m})
        if state is not None:
            if state.adaptive and val:
                state = update_weights(state, row["val_acc"])
            row.update(omega0=state.omega[0], omega1=state.omega[1], omega2=state.omega[2])
        row["wall_s"] = time.perf_counter() - t0
        runlog.append(stage, epoch, **row)
    model.eval()
    return model, state


# -- stages ------------------------------------------------------------------

@dataclass
class RunResult:
    model: Classifier
    test_metrics: dict
    log: RunLog
    data_hash: str
    run_dir: Path


class Run:
    """One run directory: config snapshot, checkpoints, logs and evaluation outputs."""

    def __init__(self, cfg: RunConfig, run_dir, force: bool = False):
        self.cfg = cfg
        self.dir = Path(run_dir)
        self.dir.mkdir(parents=True, exist_ok=True)
        self.force = force
        self._prep: Prepared | None = None
        self.log = RunLog()
        self.metrics_rows: list[dict] = []
        (self.dir / "config.resolved").write_text(cfg.to_text())

    @property
    def prep(self) -> Prepared:
        if self._prep is None:
            self._prep = prepare_data(self.cfg)
        return self._prep

    def path(self, stage: str) -> Path:
        return self.dir / CKPT[stage]

    def _check_hash(self, meta: dict, what: str) -> None:
        if meta.get("data_hash") != self.prep.hash:
            msg = (f"{what} was trained on data {meta.get('data_hash', '?')[:12]}, "
                   f"current training data is {self.prep.hash[:12]}")
            if not self.force:
                raise DataHashMismatch(msg + " (use force to override)")
            log.warning("%s; continuing because force is set", msg)

    def _reusable(self, stage: str) -> bool:
        """A checkpoint is reused only when written under the same resolved config."""
        p = self.path(stage)
        if not p.exists() or not (self.dir / f"log_{stage}.csv").exists():
            return False
        _, meta = checkpoint.load(p)
        return meta.get("config") == self.cfg.to_text()

    def _restore_log(self, stage: str) -> None:
        for row in read_csv_rows(self.dir / f"log_{stage}.csv"):
            self.log.rows.append({k: v for k, v in row.items() if v != ""})

    def _write_log(self, stage: str) -> None:
        text = rows_to_csv(self.log.stage_rows(stage), LOG_FIELDS)
        (self.dir / f"log_{stage}.csv").write_text(text)

    # stage 1
    def train_diffusion(self, resume: bool = True):
        stage = "diffusion"
        if resume and self._reusable(stage):
            self._restore_log(stage)
            return self.load_diffusion()
        cfg, prep = self.cfg, self.prep
        sched = build_schedule(cfg["diffusion.T"], cfg["diffusion.s"])
        net = DenoiserNet(prep.channels, prep.n_classes, seed=derive_seed(cfg.seed, "denoiser/init"),
                          channels=cfg["diffusion.channels"], blocks=cfg["diffusion.blocks"],
                          kernel=cfg["diffusion.kernel"])
        proto = fit_prototypes((s.f, s.y) for s in prep.train)
        t0 = time.perf_counter()
        trace = train_denoiser(prep.train, sched, net, cfg["diffusion.epochs"], lr=cfg["diffusion.lr"],
                               seed=derive_seed(cfg.seed, "denoiser/train"), batch_size=cfg["diffusion.batch"],
                               weighting=cfg["diffusion.weighting"])
        wall = (time.perf_counter() - t0) / max(1, len(trace.epoch_loss))
        for epoch, loss in enumerate(trace.epoch_loss):
            self.log.append(stage, epoch, loss=loss, wall_s=wall)
        clip = float(max(np.abs(s.x0).max() for s in prep.train)) if cfg["diffusion.clip"] else 0.0
        save_model(self.path(stage), net, cfg, prep.hash,
                   {"schedule": f"T={sched.T};s={sched.s}", "clip_x0": repr(clip)}, proto.to_tensors())
        self._write_log(stage)
        return net, sched, proto, clip

    def load_diffusion(self):
        p = self.path("diffusion")
        if not p.exists():
            raise FileNotFoundError(f"no diffusion checkpoint at {p}; run train-diffusion first")
        net, tensors, meta = load_model(p)
        self._check_hash(meta, "diffusion checkpoint")
        T, s = (kv.split("=")[1] for kv in meta["schedule"].split(";"))
        sched = build_schedule(int(T), float(s))
        return net, sched, PrototypeTable.from_tensors(tensors), float(meta["clip_x0"])

    def synthesize(self, M: int | None = None):
        net, sched, proto, clip = self.load_diffusion()
        if M is None:
            M = self.cfg["synth.M"]
            M = len(self.prep.train) if M < 0 else M
        if M == 0:
            return []
        return synthesize_dataset(net, sched, proto, M, seed=derive_seed(self.cfg.seed, "synth"),
                                  balanced=self.cfg["synth.balanced"], clip_x0=clip or None)

    def _fresh_classifier(self) -> Classifier:
        return build_classifier(self.cfg, self.prep.channels, self.prep.n_classes,
                                derive_seed(self.cfg.seed, "classifier/init"))

    # stage 2
    def pretrain(self, resume: bool = True):
        stage = "pretrain"
        if resume and self._reusable(stage):
            self._restore_log(stage)
            return self.load_classifier(stage)
        cfg, prep = self.cfg, self.prep
        synthetic = self.synthesize() if "diffusion" in cfg.stages or self.path("diffusion").exists() else []
        model = self._fresh_classifier()
        if not synthetic:
            self.log.append(stage, 0, note="skipped (M=0)")
            save_model(self.path(stage), model, cfg, prep.hash, {"skipped": "1"})
            self._write_log(stage)
            return model
        D.save_windows(synthetic, self.dir / "synthetic.csv")
        train_classifier(model, synthetic, [], cfg["pretrain.epochs"], cfg["pretrain.lr"], cfg["pretrain.batch"],
                         cfg.seed, self.log, stage, prep.n_classes, optimizer=cfg["optim.name"])
        save_model(self.path(stage), model, cfg, prep.hash)
        self._write_log(stage)
        return model

    def load_classifier(self, stage: str) -> Classifier:
        p = self.path(stage)
        if not p.exists():
            raise FileNotFoundError(f"no {stage} checkpoint at {p}")
        model, _, meta = load_model(p)
        self._check_hash(meta, f"{stage} checkpoint")
        return model

    # stage 3
    def finetune(self, resume: bool = True):
        stage = "finetune"
        if resume and self._reusable(stage):
            self._restore_log(stage)
            self._restore_metrics()
            return self.load_classifier(stage)
        cfg, prep = self.cfg, self.prep
        model = self.load_classifier("pretrain") if self.path("pretrain").exists() else self._fresh_classifier()
        train = list(prep.train)
        mix = cfg["finetune.mix"]
        if mix > 0:
            synthetic = D.load_windows(self.dir / "synthetic.csv")
            n_syn = min(len(synthetic), int(round(mix / (1 - mix) * len(train))))
            train += synthetic[:n_syn]
        counts = D.imbalance_report(prep.train)["counts"]
        state = loss_state(cfg, counts) if cfg["loss.adaptive"] else None
        rows: list[dict] = []
        model, state = train_classifier(model, train, prep.val, cfg["finetune.epochs"], cfg["finetune.lr"],
                                        cfg["finetune.batch"], cfg.seed, self.log, stage, prep.n_classes,
                                        state=state, optimizer=cfg["optim.name"], ece_bins=cfg["eval.ece_bins"],
                                        metrics_rows=rows)
        self.metrics_rows.extend(rows)
        (self.dir / "metrics_val.csv").write_text(rows_to_csv(rows, ("stage", "split", "epoch", *METRIC_FIELDS)))
        if state is not None:
            weights = [{"epoch": r["epoch"], "acc": r.get("val_acc"), "omega0": r["omega0"],
                        "omega1": r["omega1"], "omega2": r["omega2"]} for r in self.log.stage_rows(stage)]
            (self.dir / "weights.csv").write_text(rows_to_csv(weights, ("epoch", "acc", "omega0", "omega1", "omega2")))
        save_model(self.path(stage), model, cfg, prep.hash)
        self._write_log(stage)
        return model

    def _restore_metrics(self) -> None:
        p = self.dir / "metrics_val.csv"
        if p.exists():
            self.metrics_rows.extend(read_csv_rows(p))

    def evaluate(self, model: Classifier, split: str = "test") -> dict:
        samples = getattr(self.prep, split)
        m = evaluate_model(model, samples, self.prep.n_classes, self.cfg["eval.ece_bins"])
        fields = ("split", *METRIC_FIELDS, *(f"recall_{k}" for k in range(self.prep.n_classes)))
        (self.dir / f"metrics_{split}.csv").write_text(rows_to_csv([{"split": split, **m}], fields))
        return m

    def write_log(self) -> None:
        (self.dir / "log.csv").write_text(self.log.to_csv())


def run_pipeline(cfg: RunConfig, run_dir, resume: bool = True, force: bool = False) -> RunResult:
    """Run the configured stages in order and evaluate the final model on the test split."""
    run = Run(cfg, run_dir, force=force)
    stages = cfg.stages
    model = None
    if "diffusion" in stages:
        run.train_diffusion(resume)
    if "pretrain" in stages:
        model = run.pretrain(resume)
    if "finetune" in stages:
        model = run.finetune(resume)
    if model is None:
        model = run._fresh_classifier()
    metrics = run.evaluate(model, "test")
    run.write_log()
    return RunResult(model, metrics, run.log, run.prep.hash, run.dir)


# -- ablation -------------------------------------------------------------------

def toggle_overrides(cfg: RunConfig, toggle: str, enabled: bool) -> dict:
    if toggle == "spatial_attn":
        return {"model.spatial_attn": enabled}
    if toggle == "temporal_attn":
        return {"model.temporal_attn": enabled}
    if toggle == "adaptive_loss":
        return {"loss.adaptive": enabled}
    if toggle == "augmentation":
        return {} if enabled else {"stages": "finetune"}
    raise ConfigError(f"unknown ablation toggle {toggle!r}; expected a subset of {list(TOGGLES)}")


ABLATION_FIELDS = ("run", *TOGGLES, "seed", "data_hash", "Acc", "Pre", "Rec", "F1", "G-mean", "AUC")


def run_ablation(cfg: RunConfig, toggles, out_dir) -> list[dict]:
    """Every on/off combination of ``toggles`` (one baseline run when empty); writes ``ablation.csv``."""
    toggles = [t for t in toggles if t]
    for t in toggles:
        toggle_overrides(cfg, t, True)
    out_dir = Path(out_dir)
    rows = []
    for k, combo in enumerate(itertools.product((True, False), repeat=len(toggles))):
        overrides: dict = {}
        for t, on in zip(toggles, combo):
            overrides.update(toggle_overrides(cfg, t, on))
        run_cfg = cfg.with_overrides(overrides)
        result = run_pipeline(run_cfg, out_dir / f"run{k:02d}", resume=False)
        row = {"run": k, "seed": cfg.seed, "data_hash": result.data_hash}
        for t in TOGGLES:
            row[t] = ("on" if dict(zip(toggles, combo))[t] else "off") if t in toggles else "base"
        row.update({m: result.test_metrics[m] for m in ("Acc", "Pre", "Rec", "F1", "G-mean", "AUC")})
        rows.append(row)
    (out_dir / "ablation.csv").write_text(rows_to_csv(rows, ABLATION_FIELDS))
    return rows
