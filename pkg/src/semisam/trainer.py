"""Training loop, sliding-window inference, evaluation and checkpoints."""

from __future__ import annotations

import copy
import csv
import json
import logging
import subprocess
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import torch

from . import __version__
from .config import ExperimentConfig, config_from_dict, dump_config
from .losses import consistency_loss, sam_consistency_loss, supervised_loss, total_objective
from .metrics import MetricsReport, evaluate_cases
from .network import BackboneConfig, VNet, build_model, forward, perturb_input
from .oracle import CachedOracle, build_backend, extract_prompts
from .schedules import learning_rate
from .teacher import ema_alpha, ema_update, estimate_uncertainty, uncertainty_mask
from .volumes import Volume, case_paths, list_cases, load_case, pad_to, sample_patch, split_dataset

logger = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1
LOG_COLUMNS = [
    "t", "lr", "lambda_c", "lambda_s", "l_sup", "l_con", "l_sam", "total", "sam_skipped", "n_sam_skipped",
]


# ---------------------------------------------------------------------------
# data


@dataclass
class CaseData:
    case_id: str
    volume: Volume
    mask: Optional[np.ndarray]


@dataclass
class TrainingData:
    labeled: list
    unlabeled: list
    test: list
    # unlabeled ground truth, visible to the synthetic oracle only
    oracle_masks: dict = field(default_factory=dict)


def load_training_data(cfg: ExperimentConfig) -> TrainingData:
    root = Path(cfg.data.root)
    ids = list_cases(root)
    if not ids:
        raise FileNotFoundError(f"no cases found in {root}")
    split = split_dataset(ids, cfg.data.m_labeled, cfg.data.n_test, cfg.data.seed)

    def load(cid, need_mask):
        img, lab = case_paths(root, cid)
        vol, mask = load_case(img, lab if lab.exists() else None)
        if need_mask and mask is None:
            raise FileNotFoundError(f"case {cid} has no label file {lab}")
        return CaseData(cid, vol, mask)

    labeled = [load(c, True) for c in split.labeled]
    unlabeled, oracle_masks = [], {}
    for cid in split.unlabeled:
        case = load(cid, False)
        if case.mask is not None:
            oracle_masks[cid] = case.mask
        unlabeled.append(CaseData(cid, case.volume, None))
    test = [load(c, True) for c in split.test]
    return TrainingData(labeled, unlabeled, test, oracle_masks)


# ---------------------------------------------------------------------------
# state


@dataclass
class TrainState:
    t: int
    student: VNet
    teacher: VNet
    optimizer: torch.optim.Optimizer
    data_rng: np.random.Generator
    oracle_rng: np.random.Generator
    noise_gen: torch.Generator
    dropout_gen: torch.Generator
    config: ExperimentConfig


def _torch_gen(seed: int) -> torch.Generator:
    g = torch.Generator()
    g.manual_seed(int(seed))
    return g


def init_state(cfg: ExperimentConfig) -> TrainState:
    seeds = np.random.SeedSequence(cfg.train.seed).spawn(5)
    model_seed, data_seed, oracle_seed, noise_seed, dropout_seed = (int(s.generate_state(1)[0]) for s in seeds)
    student = build_model(cfg.backbone, seed=model_seed)
    teacher = copy.deepcopy(student)
    for p in teacher.parameters():
        p.requires_grad_(False)
    opt = torch.optim.SGD(
        student.parameters(), lr=cfg.optim.lr0, momentum=cfg.optim.momentum, weight_decay=cfg.optim.weight_decay
    )
    return TrainState(
        t=0,
        student=student,
        teacher=teacher,
        optimizer=opt,
        data_rng=np.random.default_rng(data_seed),
        oracle_rng=np.random.default_rng(oracle_seed),
        noise_gen=_torch_gen(noise_seed),
        dropout_gen=_torch_gen(dropout_seed),
        config=cfg,
    )


def set_deterministic(flag: bool) -> None:
    torch.use_deterministic_algorithms(flag)
    if flag:
        torch.backends.cudnn.benchmark = False


# ---------------------------------------------------------------------------
# batches


@dataclass
class Batch:
    images: torch.Tensor
    masks: Optional[torch.Tensor]
    case_ids: list
    offsets: list


def draw_batch(cases: list, n: int, patch_shape, rng: np.random.Generator, with_masks: bool, fg_prob: float) -> Batch:
    """``n`` patches from cases drawn with replacement."""
    imgs, masks, ids, offsets = [], [], [], []
    for _ in range(n):
        case = cases[int(rng.integers(len(cases)))]
        img, msk, off = sample_patch(
            case.volume, case.mask if with_masks else None, patch_shape, rng, fg_prob=fg_prob, return_offset=True
        )
        imgs.append(img.data)
        masks.append(msk)
        ids.append(case.case_id)
        offsets.append(off)
    images = torch.from_numpy(np.stack(imgs)[:, None])
    mask_t = torch.from_numpy(np.stack(masks).astype(np.int64)) if with_masks else None
    return Batch(images, mask_t, ids, offsets)


def draw_batches(state: TrainState, data: TrainingData):
    cfg = state.config
    labeled = draw_batch(data.labeled, cfg.train.labeled_bs, cfg.data.patch_shape, state.data_rng, True, cfg.data.fg_prob)
    unlabeled = None
    if cfg.framework.base != "sup":
        unlabeled = draw_batch(data.unlabeled, cfg.train.unlabeled_bs, cfg.data.patch_shape, state.data_rng, False, 0.0)
    return labeled, unlabeled


# ---------------------------------------------------------------------------
# step


def _sam_term(state: TrainState, oracle: Optional[CachedOracle], student_unl: torch.Tensor, batch: Batch):
    """Pseudo-label consistency over unlabeled samples; returns (loss, n_skipped)."""
    cfg = state.config
    probs = student_unl.detach().cpu().numpy()
    keep, labels = [], []
    for i in range(probs.shape[0]):
        prompts = extract_prompts(probs[i], cfg.oracle.k_positive, rng=state.oracle_rng)
        if not prompts or oracle is None:
            continue  # nothing localized yet: skip rather than prompt blindly
        label = oracle(batch.images[i, 0].numpy(), prompts, case_id=batch.case_ids[i], offset=batch.offsets[i])
        if label.skipped:
            continue
        keep.append(i)
        labels.append(torch.from_numpy(label.mask.astype(np.int64)))
    n_skipped = probs.shape[0] - len(keep)
    if not keep:
        return None, n_skipped
    return sam_consistency_loss(student_unl[keep], torch.stack(labels)), n_skipped


def train_step(state: TrainState, labeled: Batch, unlabeled: Optional[Batch], oracle: Optional[CachedOracle] = None):
    """One SGD step on the combined objective followed by the EMA update."""
    cfg = state.config
    t, t_max = state.t, cfg.train.t_max
    lr = learning_rate(t, cfg.optim.lr0, cfg.optim.decay_every, cfg.optim.decay_factor)
    for group in state.optimizer.param_groups:
        group["lr"] = lr

    state.student.train()
    n_lab = labeled.images.shape[0]
    inputs = labeled.images if unlabeled is None else torch.cat([labeled.images, unlabeled.images])
    probs = forward(state.student, inputs, stochastic=True, generator=state.dropout_gen)
    l_sup = supervised_loss(probs[:n_lab], labeled.masks)

    zero = l_sup.new_zeros(())
    l_con, l_sam, n_skipped = zero, zero, 0
    if unlabeled is not None:
        student_unl = probs[n_lab:]
        x = unlabeled.images
        if cfg.train.teacher_input_noise:
            x = perturb_input(x, state.noise_gen, cfg.train.noise_sigma, cfg.train.noise_clip)
        with torch.no_grad():
            if cfg.framework.base == "uamt":
                teacher_pm, u = estimate_uncertainty(state.teacher, x, cfg.train.uamt_passes, state.dropout_gen)
                mask = uncertainty_mask(u, t, t_max, cfg.backbone.num_classes)
            else:
                teacher_pm = forward(state.teacher, x, stochastic=True, generator=state.dropout_gen)
                mask = None
        l_con = consistency_loss(student_unl, teacher_pm, mask)
        if cfg.framework.variant == "semisam":
            sam, n_skipped = _sam_term(state, oracle, student_unl, unlabeled)
            if sam is not None:
                l_sam = sam
        else:
            n_skipped = unlabeled.images.shape[0]

    sam_skipped = cfg.framework.variant != "semisam" or unlabeled is None or n_skipped == unlabeled.images.shape[0]
    breakdown = total_objective(l_sup, l_con, l_sam, t, t_max, sam_skipped, cfg.optim.w_base)

    state.optimizer.zero_grad(set_to_none=True)
    breakdown.total.backward()
    state.optimizer.step()
    if cfg.framework.base != "sup":
        ema_update(state.teacher, state.student, min(ema_alpha(t), cfg.train.ema_cap))
    state.t = t + 1

    row = {"t": t, "lr": lr, **breakdown.as_row(), "n_sam_skipped": n_skipped}
    return state, breakdown, row


# ---------------------------------------------------------------------------
# checkpoints


def _rng_state(state: TrainState) -> dict:
    return {
        "data": state.data_rng.bit_generator.state,
        "oracle": state.oracle_rng.bit_generator.state,
        "noise": state.noise_gen.get_state(),
        "dropout": state.dropout_gen.get_state(),
    }


def save_checkpoint(state: TrainState, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "format_version": CHECKPOINT_VERSION,
        "package_version": __version__,
        "t": state.t,
        "backbone": state.config.backbone.to_dict(),
        "config": state.config.to_dict(),
        "student": state.student.state_dict(),
        "teacher": state.teacher.state_dict(),
        "optimizer": state.optimizer.state_dict(),
        "rng": _rng_state(state),
    }
    tmp = path.with_suffix(path.suffix + ".tmp")
    torch.save(payload, tmp)
    tmp.replace(path)
    return path


def read_checkpoint(path) -> dict:
    payload = torch.load(Path(path), map_location="cpu", weights_only=False)
    if payload.get("format_version") != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint format {payload.get('format_version')}")
    return payload


def load_model(path, which: str = "student") -> tuple[VNet, dict]:
    payload = read_checkpoint(path)
    model = build_model(BackboneConfig.from_dict(payload["backbone"]))
    model.load_state_dict(payload[which])
    model.eval()
    return model, payload


def restore_state(path, cfg: Optional[ExperimentConfig] = None) -> TrainState:
    payload = read_checkpoint(path)
    cfg = cfg or config_from_dict(payload["config"])
    state = init_state(cfg)
    state.student.load_state_dict(payload["student"])
    state.teacher.load_state_dict(payload["teacher"])
    state.optimizer.load_state_dict(payload["optimizer"])
    rng = payload["rng"]
    state.data_rng.bit_generator.state = rng["data"]
    state.oracle_rng.bit_generator.state = rng["oracle"]
    state.noise_gen.set_state(rng["noise"])
    state.dropout_gen.set_state(rng["dropout"])
    state.t = int(payload["t"])
    return state


# ---------------------------------------------------------------------------
# inference and evaluation


def window_starts(size: int, patch: int, stride: int) -> list:
    """Start offsets covering [0, size) with the last window flush to the end."""
    if size <= patch:
        return [0]
    starts = list(range(0, size - patch + 1, stride))
    if starts[-1] != size - patch:
        starts.append(size - patch)
    return starts


@torch.no_grad()
def predict_probs(model: VNet, volume: Volume, patch_shape, stride=None, batch_size: int = 4) -> np.ndarray:
    """Sliding-window class probabilities, overlaps averaged uniformly."""
    patch_shape = tuple(int(p) for p in patch_shape)
    stride = tuple(int(s) for s in stride) if stride is not None else tuple(max(p // 2, 1) for p in patch_shape)
    if any(s > p for s, p in zip(stride, patch_shape)):
        raise ValueError("stride must not exceed the patch shape")
    model.eval()
    data, before = pad_to(volume.data, patch_shape)
    grids = [window_starts(s, p, st) for s, p, st in zip(data.shape, patch_shape, stride)]
    starts = [(z, y, x) for z in grids[0] for y in grids[1] for x in grids[2]]
    dtype = next(model.parameters()).dtype
    acc = np.zeros((model.config.num_classes, *data.shape), dtype=np.float64)
    count = np.zeros(data.shape, dtype=np.float64)
    for i in range(0, len(starts), batch_size):
        chunk = starts[i:i + batch_size]
        x = np.stack([data[z:z + patch_shape[0], y:y + patch_shape[1], w:w + patch_shape[2]] for z, y, w in chunk])
        probs = forward(model, torch.from_numpy(x[:, None]).to(dtype)).numpy()
        for (z, y, w), p in zip(chunk, probs):
            sl = (slice(z, z + patch_shape[0]), slice(y, y + patch_shape[1]), slice(w, w + patch_shape[2]))
            acc[(slice(None), *sl)] += p
            count[sl] += 1
    acc /= count
    crop = tuple(slice(b, b + s) for b, s in zip(before, volume.shape))
    return acc[(slice(None), *crop)]


def binarize(probs: np.ndarray) -> np.ndarray:
    # background wins ties
    return (probs[1] > probs[0]).astype(np.uint8)


def infer_volume(model: VNet, volume: Volume, patch_shape, stride=None) -> np.ndarray:
    return binarize(predict_probs(model, volume, patch_shape, stride))


def evaluate(model: VNet, test_set: list, cfg: ExperimentConfig) -> MetricsReport:
    if not test_set:
        raise ValueError("evaluation needs at least one test case")
    preds, refs, spacings = {}, {}, {}
    for case in test_set:
        preds[case.case_id] = infer_volume(model, case.volume, cfg.data.patch_shape, cfg.eval.stride)
        refs[case.case_id] = case.mask
        spacings[case.case_id] = case.volume.spacing
    return evaluate_cases(preds, refs, spacings, cfg.eval.unit)


# ---------------------------------------------------------------------------
# training loop


@dataclass
class RunArtifacts:
    output_dir: Path
    log_path: Path
    checkpoints: list = field(default_factory=list)
    reports: dict = field(default_factory=dict)

    @property
    def final_report(self) -> Optional[MetricsReport]:
        return self.reports[max(self.reports)] if self.reports else None


def _format(v):
    return repr(v) if isinstance(v, float) else str(v)


def _code_version() -> str:
    try:
        rev = subprocess.run(
            ["git", "rev-parse", "--short", "HEAD"], capture_output=True, text=True, timeout=5,
            cwd=Path(__file__).parent,
        )
        if rev.returncode == 0:
            return f"{__version__}+{rev.stdout.strip()}"
    except (OSError, subprocess.SubprocessError):
        pass
    return __version__


def build_oracle(cfg: ExperimentConfig, data: TrainingData) -> Optional[CachedOracle]:
    if cfg.framework.variant != "semisam":
        return None
    oc = cfg.oracle
    if oc.backend == "synthetic" and not data.oracle_masks:
        raise ValueError("synthetic oracle needs label files for the unlabeled cases")
    backend = build_backend(oc.backend, data.oracle_masks, (oc.radius, oc.flip_rate), cfg.train.seed, oc.spool, oc.timeout)
    return CachedOracle(backend, oc.cache_size)


def _write_report(report: MetricsReport, out_dir: Path, t: int, figures: bool) -> None:
    stem = out_dir / f"metrics_t{t:06d}"
    report.write_csv(stem.with_suffix(".csv"))
    report.write_json(stem.with_suffix(".json"))
    if figures:
        from .plotting import plot_metrics

        plot_metrics(report, stem.with_suffix(".png"), title=f"t = {t}")


def train(
    cfg: ExperimentConfig,
    resume: Optional[str] = None,
    data: Optional[TrainingData] = None,
    stop_at: Optional[int] = None,
    figures: bool = True,
    evaluate_runs: bool = True,
) -> RunArtifacts:
    """Run from step 0 (or a checkpoint) to ``t_max``.

    ``stop_at`` halts early after that many total steps, leaving a checkpoint,
    which is how interrupted runs are simulated.
    """
    cfg.validate()
    set_deterministic(cfg.train.deterministic)
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    data = data or load_training_data(cfg)
    oracle = build_oracle(cfg, data)
    state = restore_state(resume, cfg) if resume else init_state(cfg)
    if cfg.framework.base != "sup" and not data.unlabeled:
        raise ValueError("semi-supervised training needs unlabeled cases")

    dump_config(cfg, out / "config.yaml")
    manifest = {
        "code_version": _code_version(),
        "framework": cfg.framework.name,
        "resumed_from": str(resume) if resume else None,
        "start_t": state.t,
        "split": {
            "labeled": [c.case_id for c in data.labeled],
            "unlabeled": [c.case_id for c in data.unlabeled],
            "test": [c.case_id for c in data.test],
        },
        "config": cfg.to_dict(),
    }
    (out / "run_manifest.json").write_text(json.dumps(manifest, indent=2))

    log_path = out / "train_log.csv"
    artifacts = RunArtifacts(out, log_path)
    fresh = state.t == 0 or not log_path.exists()
    if not fresh:
        _truncate_log(log_path, state.t)
    end = cfg.train.t_max if stop_at is None else min(stop_at, cfg.train.t_max)

    with open(log_path, "w" if fresh else "a", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=LOG_COLUMNS)
        if fresh:
            writer.writeheader()
        while state.t < end:
            labeled, unlabeled = draw_batches(state, data)
            try:
                state, breakdown, row = train_step(state, labeled, unlabeled, oracle)
            except FloatingPointError:
                logger.error("aborting at t=%d; last checkpoint left in place", state.t)
                raise
            writer.writerow({k: _format(v) for k, v in row.items()})
            t = state.t
            if t % 50 == 0 or t == 1:
                logger.info("t=%d total=%.4f sup=%.4f con=%.4f sam=%.4f", t, row["total"], row["l_sup"], row["l_con"], row["l_sam"])
            if t % cfg.train.checkpoint_every == 0 or t == end:
                fh.flush()
                artifacts.checkpoints.append(save_checkpoint(state, out / f"checkpoint_t{t:06d}.pt"))
            if evaluate_runs and data.test and (t % cfg.train.eval_every == 0 or t == cfg.train.t_max):
                report = evaluate(state.student, data.test, cfg)
                artifacts.reports[t] = report
                _write_report(report, out, t, figures)
                logger.info("t=%d eval %s", t, report.mean())
    if state.t == cfg.train.t_max:
        save_checkpoint(state, out / "checkpoint_final.pt")
    if oracle is not None:
        logger.info("oracle cache: %d hits, %d misses", oracle.hits, oracle.misses)
    if figures:
        from .plotting import plot_training_log

        plot_training_log(log_path, out / "train_log.png")
    return artifacts


def _truncate_log(path: Path, t: int) -> None:
    """Drop log rows at or after ``t`` so a resumed run appends cleanly."""
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    kept = [rows[0]] + [r for r in rows[1:] if int(r[0]) < t]
    with open(path, "w", newline="") as fh:
        csv.writer(fh).writerows(kept)


def read_log(path) -> list:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def export_prompts(model: VNet, cases: list, patch_shape, k_positive: int = 1, stride=None) -> list:
    """Whole-volume prompts per case from sliding-window probabilities."""
    out = []
    for case in cases:
        probs = predict_probs(model, case.volume, patch_shape, stride)
        prompts = extract_prompts(probs, k_positive)
        out.append({"case_id": case.case_id, "points": prompts.to_json(), "n_points": len(prompts)})
    return out

