"""Experiment harness: synthetic data, ASR evaluation, transfer matrices,
ablation sweeps, module ablation, and image export.

The transfer protocol is desk scale: one convnet source, a matrix of
black-box targets that differ in architecture, width, seed, or adversarial
training, and a shared eval split of 200 images. All randomness flows from
one master seed through per-purpose stream paths, so any two attacks in a
report are paired draw-for-draw.
"""

from __future__ import annotations

import csv
import io
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from .attack_engine import ATTACKS, AttackConfig, mi_fgsm_attack, run_attack
from .models import Dataset, ModelHandle, predict, train
from .numerics import RandomStream, upsample_bilinear

__all__ = [
    "AttackReport",
    "ExperimentSpec",
    "ReportRow",
    "SOURCE_ID",
    "TARGET_IDS",
    "ablation_sweep",
    "build_model_suite",
    "craft_adversarial",
    "evaluate_asr",
    "export_images",
    "generate_dataset",
    "module_ablation",
    "run_experiment",
]

_IMAGE_TAG = 7  # stream branch for per-image attack randomness

SOURCE_ID = "cnn_small_a"
TARGET_IDS = ("cnn_wide_b", "cnn_small_c", "linear_softmax", "cnn_small_adv")

ABLATION_PARAMS = ("N", "beta", "n", "kernel", "rho", "sigma")
MODULE_ABLATION_ARMS = ("mi_fgsm", "ham", "hfm", "fsa")


# ---------------------------------------------------------------------------
# synthetic dataset
# ---------------------------------------------------------------------------


def _grating(coord, gen):
    freq = gen.uniform(2.0, 5.0)
    phase = gen.uniform(0.0, 2.0 * np.pi)
    return 0.5 + 0.5 * np.sin(2.0 * np.pi * freq * coord + phase)


def _pattern(family: int, gen, h: int, w: int) -> np.ndarray:
    yy, xx = np.meshgrid(np.arange(h, dtype=np.float64), np.arange(w, dtype=np.float64), indexing="ij")
    if family == 0:  # horizontal grating
        return _grating(yy / h, gen)
    if family == 1:  # vertical grating
        return _grating(xx / w, gen)
    if family == 2:  # diagonal grating
        return _grating((xx + yy) / (h + w), gen)
    if family == 3:  # checkerboard
        cell = int(gen.choice([4, 5, 6, 8]))
        oy, ox = int(gen.integers(0, cell)), int(gen.integers(0, cell))
        return ((((yy + oy) // cell) + ((xx + ox) // cell)) % 2).astype(np.float64)
    if family == 4:  # concentric rings
        cy = h / 2 + gen.uniform(-h / 4, h / 4)
        cx = w / 2 + gen.uniform(-w / 4, w / 4)
        r = np.hypot(yy - cy, xx - cx) / (np.hypot(h, w) / 2)
        freq = gen.uniform(2.5, 5.0)
        return 0.5 + 0.5 * np.sin(2.0 * np.pi * freq * r + gen.uniform(0, 2 * np.pi))
    if family == 5:  # a few soft blobs
        p = np.zeros((h, w))
        for _ in range(int(gen.integers(2, 4))):
            cy, cx = gen.uniform(4, h - 4), gen.uniform(4, w - 4)
            sigma = gen.uniform(2.0, 5.0)
            p += np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * sigma**2))
        return p / p.max()
    if family == 6:  # dot lattice
        period = int(gen.choice([5, 6, 7, 8]))
        oy, ox = gen.uniform(0, period), gen.uniform(0, period)
        sigma = gen.uniform(1.0, 1.6)
        dy = (yy - oy) % period
        dy = np.minimum(dy, period - dy)
        dx = (xx - ox) % period
        dx = np.minimum(dx, period - dx)
        return np.exp(-(dy**2 + dx**2) / (2 * sigma**2))
    if family == 7:  # angular spokes
        cy = h / 2 + gen.uniform(-4, 4)
        cx = w / 2 + gen.uniform(-4, 4)
        k = int(gen.choice([4, 6, 8]))
        theta = np.arctan2(yy - cy, xx - cx)
        return 0.5 + 0.5 * np.sin(k * theta + gen.uniform(0, 2 * np.pi))
    if family == 8:  # smooth clouds from an upsampled coarse grid
        grid = gen.uniform(0.0, 1.0, (4, 4))
        p = upsample_bilinear(grid, h, w)
        span = p.max() - p.min()
        return (p - p.min()) / span if span > 1e-9 else np.zeros((h, w))
    if family == 9:  # soft half-plane split at a random angle
        angle = gen.uniform(0.0, 2.0 * np.pi)
        offset = gen.uniform(-0.15, 0.15)
        s = (xx / w - 0.5) * np.cos(angle) + (yy / h - 0.5) * np.sin(angle) - offset
        return np.clip(0.5 + s / 0.1, 0.0, 1.0)
    raise ValueError(f"no pattern family {family}")


def _class_tint(cls: int, num_classes: int) -> np.ndarray:
    # evenly spaced directions on an RGB color circle; gives every class a
    # linear (mean-color) cue alongside its texture cue
    theta = 2.0 * np.pi * cls / num_classes
    return np.array([np.cos(theta), np.cos(theta - 2 * np.pi / 3), np.cos(theta + 2 * np.pi / 3)])


def generate_dataset(
    seed: int,
    num_classes: int = 10,
    per_class: int = 100,
    h: int = 32,
    w: int = 32,
    noise_std: float = 0.05,
    distractor_weight: float = 0.3,
    tint_strength: float = 0.08,
) -> Dataset:
    """Ten parametric texture families, one per class, with per-sample random
    geometry and colors. Each image blends in a pattern from another family
    (weight up to distractor_weight) so classes share features: that keeps
    trained margins finite and leaves room for perturbations to transfer.
    A jittered class-signature tint adds a weaker linear cue so the linear
    baseline is competent but clearly below the convnets. Values are
    float32-exact so dataset files roundtrip bitwise. The split is 80/20 per
    class."""
    if num_classes < 1 or num_classes > 10:
        raise ValueError("num_classes must lie in [1, 10] (one pattern family per class)")
    if per_class < 1 or h < 4 or w < 4:
        raise ValueError("invalid dataset sizes")
    if not 0.0 <= distractor_weight < 0.5:
        raise ValueError("distractor_weight must lie in [0, 0.5) so the label stays dominant")
    stream = RandomStream(seed)
    n_train = round(0.8 * per_class)
    images = np.empty((num_classes * per_class, h, w, 3))
    labels = np.empty(num_classes * per_class, dtype=np.int64)
    split = np.empty(num_classes * per_class, dtype="<U5")
    row = 0
    for cls in range(num_classes):
        for s in range(per_class):
            gen = stream.child(cls, s).generator()
            p = _pattern(cls, gen, h, w)
            if num_classes > 1 and distractor_weight > 0.0:
                other = int((cls + 1 + gen.integers(0, num_classes - 1)) % num_classes)
                lam = gen.uniform(distractor_weight / 3, distractor_weight)
                p = (1.0 - lam) * p + lam * _pattern(other, gen, h, w)
            bg = gen.uniform(0.05, 0.35, 3)
            fg = gen.uniform(0.65, 0.95, 3)
            img = bg + (fg - bg) * p[..., None]
            img = img + gen.uniform(0.5, 1.0) * tint_strength * _class_tint(cls, num_classes)
            img = np.clip(img + gen.normal(0.0, noise_std, (h, w, 3)), 0.0, 1.0)
            images[row] = img
            labels[row] = cls
            split[row] = "train" if s < n_train else "eval"
            row += 1
    images = images.astype(np.float32).astype(np.float64)
    data = Dataset(images, labels, split, num_classes=num_classes)
    data.validate()
    return data


def build_model_suite(
    dataset: Dataset,
    seed_a: int = 1001,
    seed_b: int = 2002,
    epochs: int = 30,
    learning_rate: float = 0.05,
    adv_learning_rate: float = 0.02,
) -> dict:
    """The desk-scale victim matrix: a convnet source plus four black-box
    targets that differ in width, seed, architecture, or hardening.

    The hardened member trains at a gentler rate: with half of every batch
    adversarial, the full rate oscillates into the uniform-prediction basin.
    """
    return {
        "cnn_small_a": train(dataset, "cnn_small", seed_a, epochs, learning_rate),
        "cnn_wide_b": train(dataset, "cnn_wide", seed_b, epochs, learning_rate),
        "cnn_small_c": train(dataset, "cnn_small", seed_b + 1, epochs, learning_rate),
        "linear_softmax": train(dataset, "linear_softmax", seed_b + 2, epochs, learning_rate),
        "cnn_small_adv": train(
            dataset, "cnn_small", seed_b + 3, epochs, adv_learning_rate, adversarial_eps=8 / 255
        ),
    }


# ---------------------------------------------------------------------------
# ASR
# ---------------------------------------------------------------------------


def evaluate_asr(
    target: ModelHandle,
    clean_images: np.ndarray,
    labels: np.ndarray,
    adv_images: np.ndarray,
    convention: str = "all_images",
) -> float:
    """Misclassification rate of the adversarial images on one target."""
    labels = np.asarray(labels)
    if len(clean_images) != len(adv_images) or len(labels) != len(adv_images):
        raise ValueError("clean images, labels, and adversarial images must align")
    if convention not in ("all_images", "initially_correct"):
        raise ValueError(f"unknown ASR convention {convention!r}")
    adv_pred = predict(target, adv_images)
    wrong = adv_pred != labels
    if convention == "all_images":
        return float(np.mean(wrong))
    mask = predict(target, clean_images) == labels
    if not mask.any():
        return 0.0
    return float(np.mean(wrong[mask]))


# ---------------------------------------------------------------------------
# experiments
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ExperimentSpec:
    """Which sources attack which targets with which attacks, and how ASR
    is reported. The config carries the budget and the master seed."""

    sources: tuple = (SOURCE_ID,)
    targets: tuple = TARGET_IDS
    attacks: tuple = ("mi_fgsm", "fsa")
    config: AttackConfig = field(default_factory=AttackConfig)
    asr_convention: str = "all_images"

    def validate(self) -> None:
        if not self.sources or not self.targets or not self.attacks:
            raise ValueError("sources, targets, and attacks must be non-empty")
        for attack in self.attacks:
            if attack not in ATTACKS:
                raise ValueError(f"unknown attack {attack!r} (known: {', '.join(ATTACKS)})")
        if self.asr_convention not in ("all_images", "initially_correct"):
            raise ValueError(f"unknown ASR convention {self.asr_convention!r}")
        self.config.validate()


@dataclass(frozen=True)
class ReportRow:
    source: str
    attack: str
    target: str
    asr_all: float
    asr_initially_correct: float
    n_images: int
    mean_linf: float
    mean_l2: float
    seed: int


@dataclass
class AttackReport:
    rows: tuple
    row_avgs: dict  # (source, attack) -> mean primary-convention ASR over targets
    per_image: dict  # (source, attack) -> list of per-image record dicts
    spec: ExperimentSpec
    wall_clock_s: float

    def asr(self, source: str, attack: str, target: str, convention: str | None = None) -> float:
        convention = convention or self.spec.asr_convention
        for row in self.rows:
            if (row.source, row.attack, row.target) == (source, attack, target):
                return row.asr_all if convention == "all_images" else row.asr_initially_correct
        raise KeyError((source, attack, target))


def _image_stream(cfg: AttackConfig, index: int) -> RandomStream:
    # one path per image, shared by every attack variant: paired comparisons
    return RandomStream(cfg.master_seed).child(_IMAGE_TAG, index)


def craft_adversarial(
    model: ModelHandle, attack: str, images, labels, cfg: AttackConfig, threads: int = 1
) -> np.ndarray:
    """Craft one adversarial image per input, each from its own stream path,
    so results are independent of the thread count."""

    def one(i: int) -> np.ndarray:
        adv, _ = run_attack(attack, model, images[i], int(labels[i]), cfg, _image_stream(cfg, i))
        return adv

    if threads <= 1:
        advs = [one(i) for i in range(len(images))]
    else:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            advs = list(pool.map(one, range(len(images))))  # order-preserving
    stacked = np.stack(advs) if advs else np.empty((0,) + images.shape[1:])
    _assert_batch_budget(stacked, images, cfg.eps)
    return stacked


def _assert_batch_budget(advs, images, eps) -> None:
    linf = float(np.max(np.abs(advs - images))) if advs.size else 0.0
    if linf > eps + 1e-9 or (advs.size and (advs.min() < 0.0 or advs.max() > 1.0)):
        raise RuntimeError(f"budget invariant violated in crafted batch: linf={linf}")


def run_experiment(
    spec: ExperimentSpec,
    models: dict,
    dataset: Dataset,
    out_dir=None,
    threads: int = 1,
    limit: int | None = None,
) -> AttackReport:
    """Craft once per (source, attack), evaluate on every target, and emit
    the report (CSV, Markdown, and per-image records when out_dir is set)."""
    spec.validate()
    for model_id in tuple(spec.sources) + tuple(spec.targets):
        if model_id not in models:
            raise KeyError(f"model {model_id!r} not provided")
    images, labels = dataset.eval_set()
    if limit is not None:
        images, labels = images[:limit], labels[:limit]
    started = time.perf_counter()
    clean_preds = {t: predict(models[t], images) for t in spec.targets}
    rows, row_avgs, per_image = [], {}, {}
    cfg = spec.config
    for source in spec.sources:
        for attack in spec.attacks:
            advs = craft_adversarial(models[source], attack, images, labels, cfg, threads)
            deltas = (advs - images).reshape(len(images), -1)
            linf = np.abs(deltas).max(axis=1) if len(images) else np.zeros(0)
            l2 = np.sqrt((deltas**2).sum(axis=1)) if len(images) else np.zeros(0)
            adv_preds = {t: predict(models[t], advs) for t in spec.targets}
            records = [
                {
                    "index": i,
                    "label": int(labels[i]),
                    "linf": float(linf[i]),
                    "l2": float(l2[i]),
                    "clean_pred": {t: int(clean_preds[t][i]) for t in spec.targets},
                    "adv_pred": {t: int(adv_preds[t][i]) for t in spec.targets},
                }
                for i in range(len(images))
            ]
            per_image[(source, attack)] = records
            primary = []
            for target in spec.targets:
                wrong = adv_preds[target] != labels
                asr_all = float(np.mean(wrong)) if len(images) else 0.0
                correct = clean_preds[target] == labels
                asr_ic = float(np.mean(wrong[correct])) if correct.any() else 0.0
                rows.append(
                    ReportRow(
                        source=source,
                        attack=attack,
                        target=target,
                        asr_all=asr_all,
                        asr_initially_correct=asr_ic,
                        n_images=len(images),
                        mean_linf=float(linf.mean()) if len(images) else 0.0,
                        mean_l2=float(l2.mean()) if len(images) else 0.0,
                        seed=cfg.master_seed,
                    )
                )
                primary.append(asr_all if spec.asr_convention == "all_images" else asr_ic)
            row_avgs[(source, attack)] = float(np.mean(primary))
    report = AttackReport(
        rows=tuple(rows),
        row_avgs=row_avgs,
        per_image=per_image,
        spec=spec,
        wall_clock_s=time.perf_counter() - started,
    )
    if out_dir is not None:
        _write_report(report, out_dir)
    return report


# ---------------------------------------------------------------------------
# report emission
# ---------------------------------------------------------------------------


def report_csv_text(report: AttackReport) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(
        [
            "source",
            "attack",
            "target",
            "asr_all",
            "asr_initially_correct",
            "n_images",
            "mean_linf",
            "mean_l2",
            "seed",
        ]
    )
    for r in report.rows:
        writer.writerow(
            [
                r.source,
                r.attack,
                r.target,
                f"{r.asr_all:.6f}",
                f"{r.asr_initially_correct:.6f}",
                r.n_images,
                f"{r.mean_linf:.6f}",
                f"{r.mean_l2:.6f}",
                r.seed,
            ]
        )
    return buf.getvalue()


def report_markdown_text(report: AttackReport) -> str:
    spec = report.spec
    lines = [
        "| source | attack | " + " | ".join(spec.targets) + " | AVG |",
        "|" + " --- |" * (len(spec.targets) + 3),
    ]
    for source in spec.sources:
        for attack in spec.attacks:
            cells = []
            for target in spec.targets:
                cells.append(f"{100 * report.asr(source, attack, target):.1f}")
            avg = f"{100 * report.row_avgs[(source, attack)]:.1f}"
            lines.append(f"| {source} | {attack} | " + " | ".join(cells) + f" | {avg} |")
    return "\n".join(lines) + "\n"


def _write_report(report: AttackReport, out_dir) -> None:
    import os

    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "report.csv"), "w", newline="") as fh:
        fh.write(report_csv_text(report))
    with open(os.path.join(out_dir, "report.md"), "w") as fh:
        fh.write(report_markdown_text(report))
    targets = report.spec.targets
    for (source, attack), records in report.per_image.items():
        path = os.path.join(out_dir, f"per_image_{source}_{attack}.csv")
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            header = ["index", "label", "linf", "l2"]
            header += [f"clean_pred_{t}" for t in targets]
            header += [f"adv_pred_{t}" for t in targets]
            writer.writerow(header)
            for rec in records:
                row = [rec["index"], rec["label"], f"{rec['linf']:.9f}", f"{rec['l2']:.9f}"]
                row += [rec["clean_pred"][t] for t in targets]
                row += [rec["adv_pred"][t] for t in targets]
                writer.writerow(row)


# ---------------------------------------------------------------------------
# sweeps and module ablation
# ---------------------------------------------------------------------------


def _config_with(cfg: AttackConfig, param: str, value) -> AttackConfig:
    if param == "N":
        return replace(cfg, copies=int(value))
    if param == "beta":
        return replace(cfg, hfm=replace(cfg.hfm, beta=float(value)))
    if param == "n":
        return replace(cfg, hfm=replace(cfg.hfm, levels=int(value)))
    if param == "kernel":
        return replace(cfg, hfm=replace(cfg.hfm, kernel_size=int(value)))
    if param == "rho":
        return replace(cfg, ham=replace(cfg.ham, rho=float(value)))
    if param == "sigma":
        return replace(cfg, ham=replace(cfg.ham, sigma=float(value)))
    raise ValueError(f"unknown ablation parameter {param!r} (known: {', '.join(ABLATION_PARAMS)})")


def ablation_sweep(
    spec: ExperimentSpec,
    param: str,
    values,
    models: dict,
    dataset: Dataset,
    out_dir=None,
    threads: int = 1,
    limit: int | None = None,
) -> list:
    """One run per parameter value with everything else (seeds included)
    fixed; returns curve rows (param_value, target, asr)."""
    if len(spec.attacks) != 1:
        raise ValueError("ablation sweeps take a spec with exactly one attack")
    curve = []
    for value in values:
        swept = replace(spec, config=_config_with(spec.config, param, value))
        swept.validate()
        report = run_experiment(swept, models, dataset, out_dir=None, threads=threads, limit=limit)
        for target in spec.targets:
            curve.append(
                {
                    "param_value": value,
                    "target": target,
                    "asr": report.asr(spec.sources[0], spec.attacks[0], target),
                }
            )
    if out_dir is not None:
        import os

        os.makedirs(out_dir, exist_ok=True)
        with open(os.path.join(out_dir, f"ablation_{param}.csv"), "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["param_value", "target", "asr"])
            for row in curve:
                writer.writerow([row["param_value"], row["target"], f"{row['asr']:.6f}"])
    return curve


def module_ablation(
    spec: ExperimentSpec,
    models: dict,
    dataset: Dataset,
    out_dir=None,
    threads: int = 1,
    limit: int | None = None,
) -> AttackReport:
    """Baseline / HAM-only / HFM-only / full FSA from one config, with the
    baseline arm checked bitwise against the standalone MI-FGSM attack."""
    arms_spec = replace(spec, attacks=MODULE_ABLATION_ARMS)
    report = run_experiment(arms_spec, models, dataset, out_dir=out_dir, threads=threads, limit=limit)
    images, labels = dataset.eval_set()
    if limit is not None:
        images, labels = images[:limit], labels[:limit]
    cfg = spec.config
    source = spec.sources[0]
    for i in range(len(images)):
        via_registry, _ = run_attack(
            "mi_fgsm", models[source], images[i], int(labels[i]), cfg, _image_stream(cfg, i)
        )
        direct = mi_fgsm_attack(models[source], images[i], int(labels[i]), cfg, _image_stream(cfg, i))
        if not np.array_equal(via_registry, direct):
            raise RuntimeError("module-ablation baseline arm diverged from mi_fgsm_attack")
    return report


# ---------------------------------------------------------------------------
# image export
# ---------------------------------------------------------------------------


def _to_uint8(img: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(img * 255.0), 0, 255).astype(np.uint8)


def export_images(clean: np.ndarray, adv: np.ndarray, path, amplification: float = 8.0) -> None:
    """Write clean | adversarial | amplified-difference panels as binary PPM.

    The difference panel is centered at mid-gray: 0.5 + amplification * delta,
    clipped to [0, 1]. Multiple image pairs stack as rows.
    """
    clean = np.asarray(clean, dtype=np.float64)
    adv = np.asarray(adv, dtype=np.float64)
    if clean.shape != adv.shape:
        raise ValueError("clean and adversarial shapes differ")
    if clean.ndim == 3:
        clean, adv = clean[None], adv[None]
    if clean.min() < 0.0 or clean.max() > 1.0 or adv.min() < 0.0 or adv.max() > 1.0:
        raise ValueError("images must lie in [0, 1]")
    diff = np.clip(0.5 + amplification * (adv - clean), 0.0, 1.0)
    rows = [np.concatenate([clean[i], adv[i], diff[i]], axis=1) for i in range(len(clean))]
    panel = np.concatenate(rows, axis=0)
    if panel.shape[-1] == 1:
        panel = np.repeat(panel, 3, axis=-1)
    if panel.shape[-1] != 3:
        raise ValueError("images must have 1 or 3 channels")
    data = _to_uint8(panel)
    h, w, _ = data.shape
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(data.tobytes())
