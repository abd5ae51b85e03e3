"""Two-phase training (teacher, then distilled student), evaluation and inference."""

from __future__ import annotations

import csv
import dataclasses
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .checkpoint import load_checkpoint, save_checkpoint
from .data import DatasetManifest, RawSample, SampleCache, DataError, pack_bayer, read_mosaic, write_rgb
from .losses import LossWeights, MsSsimConfig, ms_ssim, overall_loss, psnr, teacher_loss
from .model import LwIspModel, ModelConfig, TapSet, TeacherModel
from .nn import Module
from .tensor import Tensor, no_grad

log = logging.getLogger(__name__)

INIT_SCHEME = "conv weights normal(0, sqrt(2/fan_in)), zero bias, output conv scaled by 0.1"


class TrainingDiverged(RuntimeError):
    def __init__(self, step: int, value: float):
        super().__init__(f"loss became {value} at step {step}")
        self.step = step


@dataclass
class TrainConfig:
    lr: float = 8e-5
    lr_schedule: str = "constant"
    lr_step_factor: float = 0.5
    lr_step_every: int = 10
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    batch: int = 8
    epochs: int = 10
    seed: int = 0
    alpha: float = 0.4
    beta: float = 1.0
    gamma: float = 0.4
    taps: str = "up2,up3,up4"
    ckpt_every: int = 0
    model: ModelConfig = field(default_factory=ModelConfig)

    def __post_init__(self):
        if isinstance(self.model, dict):
            self.model = ModelConfig.from_dict(self.model)
        if self.lr <= 0:
            raise ValueError(f"lr must be > 0, got {self.lr}")
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch < 1:
            raise ValueError(f"batch must be >= 1, got {self.batch}")
        if self.lr_schedule not in ("constant", "step"):
            raise ValueError(f"lr_schedule must be 'constant' or 'step', got {self.lr_schedule!r}")
        TapSet.parse(self.taps)
        self.weights  # validates signs

    @property
    def weights(self) -> LossWeights:
        return LossWeights(self.alpha, self.beta, self.gamma)

    @property
    def tapset(self) -> TapSet:
        return TapSet.parse(self.taps)

    def lr_at(self, epoch: int) -> float:
        if self.lr_schedule == "step" and self.lr_step_every > 0:
            return self.lr * self.lr_step_factor ** (epoch // self.lr_step_every)
        return self.lr

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["model"] = self.model.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})

    def replace(self, **changes) -> "TrainConfig":
        """Copy with changes; model fields are routed to ``model``.

        ``seed`` drives both weight init and sample order.
        """
        train_names = {f.name for f in dataclasses.fields(TrainConfig)}
        model_names = {f.name for f in dataclasses.fields(ModelConfig)}
        model_changes = {k: changes.pop(k) for k in list(changes) if k in model_names and k not in train_names}
        if "seed" in changes:
            model_changes["seed"] = changes["seed"]
        model = dataclasses.replace(self.model, **model_changes) if model_changes else self.model
        return dataclasses.replace(self, model=model, **changes)


# ---------------------------------------------------------------- optimizer
class Adam:
    def __init__(self, params: dict, lr: float, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = params
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def step(self, lr: float | None = None) -> None:
        lr = self.lr if lr is None else lr
        self.t += 1
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        for k, p in self.params.items():
            if p.grad is None:
                continue
            g = p.grad
            m, v = self.m[k], self.v[k]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p.data -= (lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(p.data.dtype)

    def state(self) -> dict[str, np.ndarray]:
        out = {f"adam.m/{k}": a for k, a in self.m.items()}
        out.update({f"adam.v/{k}": a for k, a in self.v.items()})
        return out

    def load(self, tensors: dict, t: int) -> None:
        self.t = t
        for k in self.params:
            self.m[k] = tensors[f"adam.m/{k}"].copy()
            self.v[k] = tensors[f"adam.v/{k}"].copy()


# ---------------------------------------------------------------- reports
@dataclass
class RunReport:
    kind: str
    param_count: int
    config: dict
    epochs: list = field(default_factory=list)
    steps: list = field(default_factory=list)
    wall_time: float = 0.0

    EPOCH_FIELDS = ("epoch", "steps", "lr", "loss", "l_r", "l_s", "l_d", "val_psnr", "val_ms_ssim", "wall_time")
    STEP_FIELDS = ("step", "epoch", "loss", "l_r", "l_s", "l_d")

    def write_csv(self, path: str | Path) -> None:
        _write_rows(path, self.EPOCH_FIELDS, self.epochs)

    def write_steps_csv(self, path: str | Path) -> None:
        _write_rows(path, self.STEP_FIELDS, self.steps)

    def summary(self) -> str:
        lines = [
            f"run: {self.kind}",
            f"parameters: {self.param_count:,}",
            f"epochs: {len(self.epochs)}  steps: {len(self.steps)}  wall time: {self.wall_time:.1f}s",
        ]
        if self.epochs:
            last = self.epochs[-1]
            terms = [f"final epoch loss: {last['loss']:.6f}"]
            terms += [f"{k} {last[k]:.6f}" for k in ("l_r", "l_s", "l_d") if last.get(k) is not None]
            lines.append("  ".join(terms))
            if last.get("val_psnr") not in (None, ""):
                lines.append(f"final val PSNR: {last['val_psnr']:.3f} dB  MS-SSIM: {last['val_ms_ssim']:.4f}")
        lines.append("config:")
        lines += [f"  {k} = {v}" for k, v in sorted(_flatten(self.config).items())]
        return "\n".join(lines) + "\n"

    def write(self, out_dir: str | Path, prefix: str | None = None) -> dict:
        """Write CSVs, a text summary and a loss-curve figure; return their paths."""
        from .plotting import plot_run_report

        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        prefix = prefix or self.kind
        paths = {
            "epochs": out_dir / f"{prefix}_report.csv",
            "steps": out_dir / f"{prefix}_steps.csv",
            "summary": out_dir / f"{prefix}_summary.txt",
            "figure": out_dir / f"{prefix}_curves.png",
        }
        self.write_csv(paths["epochs"])
        self.write_steps_csv(paths["steps"])
        paths["summary"].write_text(self.summary(), encoding="utf-8")
        plot_run_report(self, paths["figure"])
        return paths


def _flatten(d: dict, prefix: str = "") -> dict:
    out = {}
    for k, v in d.items():
        if isinstance(v, dict):
            out.update(_flatten(v, f"{prefix}{k}."))
        else:
            out[f"{prefix}{k}"] = v
    return out


def _write_rows(path, fields, rows) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(fields), extrasaction="ignore")
        writer.writeheader()
        for row in rows:
            writer.writerow({k: ("" if row.get(k) is None else _fmt(row.get(k))) for k in fields})


def _fmt(v):
    if isinstance(v, float):
        return repr(v)
    return v


# ---------------------------------------------------------------- model I/O
def _model_tensors(model: Module) -> dict:
    return {f"param/{k}": p.data for k, p in model.named_parameters()}


def save_run(path, kind: str, model: Module, cfg: TrainConfig, opt: Adam | None = None, state: dict | None = None) -> None:
    config = {"kind": kind, "train": cfg.to_dict(), "state": dict(state or {})}
    tensors = _model_tensors(model)
    if opt is not None:
        config["state"]["adam_t"] = opt.t
        tensors.update(opt.state())
    save_checkpoint(path, config, tensors)


def build_model(kind: str, model_cfg: ModelConfig) -> Module:
    if kind == "student":
        return LwIspModel(model_cfg)
    if kind == "teacher":
        return TeacherModel(model_cfg)
    raise ValueError(f"unknown model kind {kind!r}")


def load_run(path, expect: str | None = None) -> tuple[Module, TrainConfig, dict, dict]:
    """Return ``(model, train config, run state, raw tensors)`` from a checkpoint."""
    config, tensors = load_checkpoint(path)
    kind = config.get("kind")
    if expect is not None and kind != expect:
        raise ValueError(f"checkpoint {path} holds a {kind} model, expected {expect}")
    cfg = TrainConfig.from_dict(config["train"])
    model = build_model(kind, cfg.model)
    for name, p in model.named_parameters():
        key = f"param/{name}"
        if key not in tensors:
            raise ValueError(f"checkpoint {path} lacks parameter {name}")
        if tensors[key].shape != p.shape:
            raise ValueError(f"checkpoint {path}: parameter {name} has shape {tensors[key].shape}, model expects {p.shape}")
        p.data = tensors[key].astype(p.data.dtype, copy=True)
    return model, cfg, config.get("state", {}), tensors


# ---------------------------------------------------------------- training
def _samples(source) -> list[RawSample]:
    if isinstance(source, DatasetManifest):
        return SampleCache(source).samples
    if isinstance(source, SampleCache):
        return source.samples
    return list(source)


def _batches(samples, cfg: TrainConfig, epoch: int):
    from .data import iterate_batches

    return iterate_batches(samples, cfg.batch, cfg.seed, epoch, np.dtype(cfg.model.dtype))


def _start(kind, model, cfg: TrainConfig, resume):
    params = dict(model.named_parameters())
    opt = Adam(params, cfg.lr, cfg.beta1, cfg.beta2, cfg.adam_eps)
    state = {"epoch": 0, "step": 0, "history": []}
    if resume is not None:
        loaded, _, rstate, tensors = load_run(resume, expect=kind)
        for (name, p), (_, q) in zip(model.named_parameters(), loaded.named_parameters()):
            p.data = q.data.copy()
        opt.load(tensors, int(rstate.get("adam_t", 0)))
        state = {"epoch": int(rstate["epoch"]), "step": int(rstate["step"]), "history": list(rstate.get("history", []))}
    return opt, state


def _check_finite(value: float, step: int) -> None:
    if not math.isfinite(value):
        raise TrainingDiverged(step, value)


def _val_metrics(predict, val_samples):
    if not val_samples:
        return None, None
    rows = score_pairs((s.id, predict(s), s.target_rgb) for s in val_samples)
    agg = aggregate(rows)
    return agg["psnr"], agg["ms_ssim"]


def _run(kind, model, cfg, samples, step_fn, predict, out_path, resume, val_samples, stop_epoch, after_backward=None):
    opt, state = _start(kind, model, cfg, resume)
    echo = dict(cfg.to_dict(), init=INIT_SCHEME)
    report = RunReport(kind, model.num_params(), echo, epochs=list(state["history"]))
    step = state["step"]
    end = cfg.epochs if stop_epoch is None else min(stop_epoch, cfg.epochs)
    t0 = time.perf_counter()
    for epoch in range(state["epoch"], end):
        lr = cfg.lr_at(epoch)
        sums: dict[str, float] = {}
        n_steps = 0
        for ids, x, y in _batches(samples, cfg, epoch):
            model.zero_grad()
            parts = step_fn(x, y)
            step += 1
            total = parts["loss"]
            _check_finite(total.item(), step)
            total.backward()
            if after_backward is not None:
                after_backward()
            opt.step(lr)
            row = {"step": step, "epoch": epoch + 1}
            for k, v in parts.items():
                row[k] = None if v is None else v.item()
                if v is not None:
                    sums[k] = sums.get(k, 0.0) + row[k]
            report.steps.append(row)
            n_steps += 1
        erow = {k: (sums[k] / n_steps if k in sums else None) for k in ("loss", "l_r", "l_s", "l_d")}
        erow.update(epoch=epoch + 1, steps=step, lr=lr, wall_time=time.perf_counter() - t0)
        vp, vm = _val_metrics(predict, val_samples)
        erow.update(val_psnr=vp, val_ms_ssim=vm)
        report.epochs.append(erow)
        log.info("%s epoch %d loss %.6f", kind, epoch + 1, erow["loss"])
        last = epoch + 1 == end
        if out_path is not None and (last or (cfg.ckpt_every and (epoch + 1) % cfg.ckpt_every == 0)):
            ckpt = Path(out_path)
            if not last:
                ckpt = ckpt.with_name(f"{ckpt.stem}_epoch{epoch + 1}{ckpt.suffix}")
            # timings stay out of the checkpoint so identical runs give identical files
            history = [{k: v for k, v in r.items() if k != "wall_time"} for r in report.epochs]
            save_run(ckpt, kind, model, cfg, opt, {"epoch": epoch + 1, "step": step, "history": history})
    report.wall_time = time.perf_counter() - t0
    return report


def train_teacher(
    cfg: TrainConfig,
    data,
    out_path: str | Path | None = None,
    resume: str | Path | None = None,
    val=None,
    stop_epoch: int | None = None,
) -> tuple[TeacherModel, RunReport]:
    """Fit the teacher to reproduce clean targets ``J -> J``.

    Objective per step: ``mean((g(J) - J)^2) + gamma * (1 - MS-SSIM)``.
    """
    samples = _samples(data)
    val_samples = _samples(val) if val is not None else []
    model = TeacherModel(cfg.model)
    ms_cfg = MsSsimConfig()

    def step_fn(x, y):
        j = Tensor(y)
        out, _ = model(j)
        loss = teacher_loss(out, j, cfg.gamma, ms_cfg)
        return {"loss": loss, "l_r": None, "l_s": None, "l_d": None}

    def predict(s):
        with no_grad():
            return model(Tensor(s.target_rgb[None].astype(cfg.model.dtype)))[0].data[0]

    report = _run("teacher", model, cfg, samples, step_fn, predict, out_path, resume, val_samples, stop_epoch)
    return model, report


def teacher_tap_shapes_match(student: LwIspModel, teacher: TeacherModel, taps: TapSet, x, y) -> None:
    with no_grad():
        _, s_taps = student(Tensor(x[:1]), taps.student)
        _, t_taps = teacher(Tensor(y[:1]), taps.teacher)
    for (s_loc, t_loc), s, t in zip(taps.pairs, s_taps, t_taps):
        if s.shape[1:] != t.shape[1:]:
            raise ValueError(f"tap pair {s_loc}:{t_loc} shapes differ: student {s.shape[1:]} vs teacher {t.shape[1:]}")


def train_student(
    cfg: TrainConfig,
    data,
    teacher_ckpt: str | Path | None = None,
    out_path: str | Path | None = None,
    resume: str | Path | None = None,
    val=None,
    stop_epoch: int | None = None,
) -> tuple[LwIspModel, RunReport]:
    """Fit the student with ``L_r + alpha*L_s + beta*L_d``.

    Without a teacher checkpoint beta is forced to 0. The teacher only runs
    under ``no_grad``; every step asserts its parameters received no gradient.
    """
    samples = _samples(data)
    val_samples = _samples(val) if val is not None else []
    teacher = None
    if teacher_ckpt is not None and cfg.beta > 0:
        teacher, _, _, _ = load_run(teacher_ckpt, expect="teacher")
    elif cfg.beta > 0:
        log.info("no teacher checkpoint given; distillation weight forced to 0")
        cfg = dataclasses.replace(cfg, beta=0.0)
    model = LwIspModel(cfg.model)
    taps = cfg.tapset
    weights = cfg.weights
    ms_cfg = MsSsimConfig()
    if teacher is not None:
        _, x0, y0 = next(iter(_batches(samples, cfg, 0)))
        teacher_tap_shapes_match(model, teacher, taps, x0, y0)

    def step_fn(x, y):
        target = Tensor(y)
        rgb, s_taps = model(Tensor(x), taps.student if teacher is not None else None)
        t_taps = None
        if teacher is not None:
            with no_grad():
                _, t_taps = teacher(target, taps.teacher)
        parts = overall_loss(rgb, target, s_taps, t_taps, weights, ms_cfg)
        return {"loss": parts.total, "l_r": parts.reconstruction, "l_s": parts.structural, "l_d": parts.distillation}

    def teacher_untouched():
        for name, p in teacher.named_parameters():
            if p.grad is not None and np.any(p.grad):
                raise RuntimeError(f"teacher parameter {name} received a gradient during student training")

    def predict(s):
        with no_grad():
            return model(Tensor(s.raw_packed[None].astype(cfg.model.dtype)))[0].data[0]

    report = _run(
        "student", model, cfg, samples, step_fn, predict, out_path, resume, val_samples, stop_epoch,
        after_backward=teacher_untouched if teacher is not None else None,
    )
    return model, report


# ---------------------------------------------------------------- evaluation
def predict_rgb(model: LwIspModel, raw_packed: np.ndarray) -> np.ndarray:
    """Run the student on one ``4 x H x W`` packed tensor, returning ``3 x 2H x 2W``."""
    dtype = np.dtype(model.cfg.dtype)
    with no_grad():
        rgb, _ = model(Tensor(raw_packed[None].astype(dtype)))
    return rgb.data[0]


def score_pairs(triples, ms_cfg: MsSsimConfig | None = None) -> list[dict]:
    """``(id, pred, target)`` triples to ``{id, psnr, ms_ssim}`` rows."""
    rows = []
    for sid, pred, target in triples:
        p = np.asarray(pred, dtype=np.float64)[None]
        t = np.asarray(target, dtype=np.float64)[None]
        with no_grad():
            rows.append({"id": sid, "psnr": psnr(p, t), "ms_ssim": ms_ssim(p, t, ms_cfg)})
    return rows


def aggregate(rows: list[dict]) -> dict:
    """Mean PSNR (``inf`` if any sample is identical) and mean MS-SSIM."""
    return {
        "id": "mean",
        "psnr": float(np.mean([r["psnr"] for r in rows])),
        "ms_ssim": float(np.mean([r["ms_ssim"] for r in rows])),
    }


def write_metrics_csv(path: str | Path, rows: list[dict]) -> dict:
    agg = aggregate(rows)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["id", "psnr", "ms_ssim"])
        for r in rows + [agg]:
            writer.writerow([r["id"], repr(float(r["psnr"])), repr(float(r["ms_ssim"]))])
    return agg


def read_metrics_csv(path: str | Path) -> tuple[list[dict], dict]:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = [{"id": r["id"], "psnr": float(r["psnr"]), "ms_ssim": float(r["ms_ssim"])} for r in csv.DictReader(fh)]
    return rows[:-1], rows[-1]


def evaluate(ckpt: str | Path, data) -> tuple[list[dict], dict]:
    model, _, _, _ = load_run(ckpt, expect="student")
    samples = _samples(data)
    rows = score_pairs((s.id, predict_rgb(model, s.raw_packed), s.target_rgb) for s in samples)
    return rows, aggregate(rows)


def infer(ckpt: str | Path, raw_path: str | Path, out_path: str | Path, pattern: str = "RGGB") -> np.ndarray:
    """Pack a mosaic PNG, run the student and write the RGB PNG; returns the RGB array."""
    model, _, _, _ = load_run(ckpt, expect="student")
    mosaic = read_mosaic(raw_path)
    h, w = mosaic.shape[1:]
    if h % 32 or w % 32:
        raise DataError(f"mosaic {raw_path} is {h}x{w}; extents must be divisible by 32")
    rgb = predict_rgb(model, pack_bayer(mosaic, pattern))
    write_rgb(out_path, rgb)
    return rgb
