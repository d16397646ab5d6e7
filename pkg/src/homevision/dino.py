"""Self-distillation pretraining with no labels.

Two networks of identical architecture, a student and a teacher, see random
crops of the same image: the teacher only the two global views, the student
every view. The teacher's outputs are centered with a running batch mean,
sharpened by a low-temperature softmax, and treated as constants; the
student is trained by SGD to match them under a cross-entropy loss. After
each step the teacher's parameters move toward the student's by an
exponential moving average.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence, TextIO

import numpy as np

from . import autodiff as ad
from . import vit
from .images import CropSpec, RasterImage, multi_crop
from .tensor import Rng, softmax_last_dim


class TrainingDivergedError(RuntimeError):
    """The training loss became non-finite."""


@dataclass(frozen=True)
class DinoConfig:
    """Trainer hyperparameters. Teacher temperature must be the sharper one."""

    prototype_dim: int = 4096
    head_hidden: int = 2048
    student_temperature: float = 0.1
    teacher_temperature: float = 0.04
    ema_momentum: float = 0.996
    center_momentum: float = 0.9
    local_view_count: int = 8
    learning_rate: float = 0.1
    steps: int = 100
    batch_size: int = 8
    global_view_size: int = 224
    local_view_size: int = 96

    def __post_init__(self):
        if not 0.0 < self.teacher_temperature < self.student_temperature:
            raise ValueError(
                "need 0 < teacher_temperature < student_temperature, got "
                f"{self.teacher_temperature} and {self.student_temperature}"
            )
        if not 0.0 < self.ema_momentum < 1.0:
            raise ValueError(f"ema_momentum must be in (0, 1), got {self.ema_momentum}")
        if not 0.0 < self.center_momentum < 1.0:
            raise ValueError(f"center_momentum must be in (0, 1), got {self.center_momentum}")

    def crop_spec(self) -> CropSpec:
        return CropSpec(
            global_size=self.global_view_size,
            local_size=self.local_view_size,
            local_count=self.local_view_count,
        )


def toy_config(
    steps: int = 200,
    batch_size: int = 8,
    local_view_count: int = 2,
    learning_rate: float = 0.5,
) -> tuple[vit.ViTConfig, DinoConfig]:
    """Mini encoder plus matching trainer settings, sized for tests."""
    cfg = vit.preset("mini")
    dcfg = DinoConfig(
        prototype_dim=64,
        head_hidden=128,
        local_view_count=local_view_count,
        learning_rate=learning_rate,
        steps=steps,
        batch_size=batch_size,
        global_view_size=cfg.input_size,
        local_view_size=cfg.input_size // 2,
    )
    return cfg, dcfg


@dataclass
class DinoState:
    """Student and teacher parameter stores plus the running output center."""

    student: dict[str, np.ndarray]
    teacher: dict[str, np.ndarray]
    center: np.ndarray
    step: int
    cfg: vit.ViTConfig
    dcfg: DinoConfig

    def __post_init__(self):
        if set(self.student) != set(self.teacher):
            raise ValueError("student and teacher parameter names differ")
        for k in self.student:
            if self.student[k].shape != self.teacher[k].shape:
                raise ValueError(f"student/teacher shape mismatch for {k!r}")
        if not np.all(np.isfinite(self.center)):
            raise ValueError("center must be finite")


def head_param_shapes(dim: int, dcfg: DinoConfig) -> dict[str, tuple[int, ...]]:
    h, k = dcfg.head_hidden, dcfg.prototype_dim
    return {
        "head.fc1.weight": (dim, h),
        "head.fc1.bias": (h,),
        "head.fc2.weight": (h, h),
        "head.fc2.bias": (h,),
        "head.fc3.weight": (h, k),
        "head.fc3.bias": (k,),
    }


def init(cfg: vit.ViTConfig, dcfg: DinoConfig, rng: Rng) -> DinoState:
    """Random student (truncated normal, std 0.02), teacher a copy, zero center."""
    student = vit.init_backbone(cfg, rng)
    for name, shape in head_param_shapes(cfg.dim, dcfg).items():
        if name.endswith(".bias"):
            student[name] = np.zeros(shape, dtype=np.float32)
        else:
            student[name] = rng.trunc_normal(shape, std=0.02).astype(np.float32)
    teacher = {k: v.copy() for k, v in student.items()}
    center = np.zeros(dcfg.prototype_dim, dtype=np.float32)
    return DinoState(student=student, teacher=teacher, center=center, step=0, cfg=cfg, dcfg=dcfg)


def head_forward(x, params):
    """Projection head: three linear layers with GELU between them."""
    x = ad.add(ad.matmul(x, params["head.fc1.weight"]), params["head.fc1.bias"])
    x = ad.gelu(x)
    x = ad.add(ad.matmul(x, params["head.fc2.weight"]), params["head.fc2.bias"])
    x = ad.gelu(x)
    return ad.add(ad.matmul(x, params["head.fc3.weight"]), params["head.fc3.bias"])


def network_logits(view: np.ndarray, params, cfg: vit.ViTConfig):
    """Backbone CLS feature of one view, through the head, as a (1, K) row."""
    tokens = vit.encode_tokens(view, params, cfg)
    cls = ad.slice_rows(tokens, 0, 1)
    return head_forward(cls, params)


def dino_loss(student_logits, teacher_logits, center: np.ndarray, dcfg: DinoConfig):
    """Cross-entropy between sharpened teacher targets and student predictions.

    Teacher rows are centered by `center` and softmaxed at the teacher
    temperature, then treated as constants (the stop-gradient); student rows
    are log-softmaxed at the student temperature. The loss averages
    H(teacher_view, student_view) over all view pairs with differing view
    indices. Returns a float for plain inputs, a Var when the student logits
    carry gradient.
    """
    teacher_logits = np.asarray(teacher_logits, dtype=np.float64)
    student_value = ad.value_of(student_logits)
    v_t, v_s = teacher_logits.shape[0], student_value.shape[0]
    if v_t == 0 or v_s == 0:
        raise ValueError("need at least one view on each side")
    if teacher_logits.shape[1] != student_value.shape[1]:
        raise ValueError(
            f"prototype dims differ: teacher {teacher_logits.shape[1]}, "
            f"student {student_value.shape[1]}"
        )
    targets = softmax_last_dim(teacher_logits - center.astype(np.float64), dcfg.teacher_temperature)
    log_probs = ad.log_softmax_rows(student_logits, dcfg.student_temperature)
    terms = []
    for t_idx in range(v_t):
        target_row = targets[t_idx : t_idx + 1]
        for s_idx in range(v_s):
            if s_idx == t_idx:
                continue
            row = ad.slice_rows(log_probs, s_idx, s_idx + 1)
            terms.append(ad.sum_all(ad.mul(row, target_row)))
    if not terms:
        raise ValueError("no view pairs with differing indices")
    total = terms[0]
    for term in terms[1:]:
        total = ad.add(total, term)
    loss = ad.scale(total, -1.0 / len(terms))
    return loss if ad.is_var(loss) else float(loss)


def teacher_targets(teacher_logits: np.ndarray, center: np.ndarray, dcfg: DinoConfig) -> np.ndarray:
    """Centered, sharpened teacher distributions (the loss targets)."""
    z = np.asarray(teacher_logits, dtype=np.float64) - center.astype(np.float64)
    return softmax_last_dim(z, dcfg.teacher_temperature)


def update_center(center: np.ndarray, teacher_logits_batch: np.ndarray, momentum: float) -> np.ndarray:
    """center' = m * center + (1 - m) * batch mean of teacher logits."""
    if not 0.0 < momentum < 1.0:
        raise ValueError(f"momentum must be in (0, 1), got {momentum}")
    batch = np.asarray(teacher_logits_batch)
    if batch.ndim != 2 or batch.shape[0] == 0:
        raise ValueError(f"need a non-empty (views, K) batch, got shape {batch.shape}")
    mean = batch.astype(np.float64).mean(axis=0)
    out = momentum * center.astype(np.float64) + (1.0 - momentum) * mean
    return out.astype(np.float32)


def update_teacher_ema(state: DinoState, momentum: float) -> DinoState:
    """Move each teacher parameter toward the student: lam*teacher + (1-lam)*student.

    Computed as teacher + (1-lam)*(student-teacher) so an equal pair of
    stores is an exact fixed point. The student is untouched.
    """
    if not 0.0 < momentum < 1.0:
        raise ValueError(f"momentum must be in (0, 1), got {momentum}")
    if set(state.student) != set(state.teacher):
        raise ValueError("student and teacher parameter names differ")
    rate = np.float32(1.0 - momentum)
    for k, t in state.teacher.items():
        state.teacher[k] = t + rate * (state.student[k] - t)
    return state


@dataclass
class StepStats:
    """Per-step diagnostics; matches the training log line fields."""

    step: int
    loss: float
    teacher_entropy: float
    center_norm: float
    teacher_batch_mean: np.ndarray = field(repr=False, default=None)


def format_log_line(stats: StepStats) -> str:
    return f"{stats.step}\t{stats.loss:.6f}\t{stats.teacher_entropy:.6f}\t{stats.center_norm:.6f}"


def train_step(
    state: DinoState,
    image_batch: Sequence[RasterImage],
    rng: Rng,
    dcfg: DinoConfig | None = None,
    stats_out: StepStats | None = None,
) -> tuple[DinoState, float]:
    """One SGD step of student training plus teacher EMA and center update.

    Per image: multi-crop views; teacher forward on the two global views
    (constants), student forward on every view; pairwise cross-entropy loss
    averaged over the batch; backprop through the student only; SGD update;
    teacher EMA; center update.
    """
    if len(image_batch) == 0:
        raise ValueError("empty image batch")
    dcfg = dcfg or state.dcfg
    cfg = state.cfg
    spec = dcfg.crop_spec()

    student_vars = {k: ad.Var(v) for k, v in state.student.items()}

    per_image_losses = []
    teacher_rows = []
    target_rows = []
    for image in image_batch:
        views = multi_crop(image, rng, spec)
        teacher_logits = np.concatenate(
            [ad.value_of(network_logits(v, state.teacher, cfg)) for v in views[:2]], axis=0
        )
        teacher_rows.append(teacher_logits)
        target_rows.append(teacher_targets(teacher_logits, state.center, dcfg))
        student_logits = ad.concat_rows([network_logits(v, student_vars, cfg) for v in views])
        per_image_losses.append(dino_loss(student_logits, teacher_logits, state.center, dcfg))

    total = per_image_losses[0]
    for term in per_image_losses[1:]:
        total = ad.add(total, term)
    loss_var = ad.scale(total, 1.0 / len(per_image_losses))
    loss = float(loss_var.value)
    if not math.isfinite(loss):
        raise TrainingDivergedError(f"non-finite loss {loss} at step {state.step}")

    ad.backward(loss_var)
    lr = dcfg.learning_rate
    for k, var in student_vars.items():
        if var.grad is not None:
            state.student[k] = (var.value.astype(np.float64) - lr * var.grad).astype(np.float32)

    update_teacher_ema(state, dcfg.ema_momentum)
    batch_logits = np.concatenate(teacher_rows, axis=0)
    state.center = update_center(state.center, batch_logits, dcfg.center_momentum)
    state.step += 1

    if stats_out is not None:
        targets = np.concatenate(target_rows, axis=0)
        entropy = float(-(targets * np.log(np.clip(targets, 1e-300, None))).sum(axis=1).mean())
        stats_out.step = state.step
        stats_out.loss = loss
        stats_out.teacher_entropy = entropy
        stats_out.center_norm = float(np.linalg.norm(state.center))
        stats_out.teacher_batch_mean = batch_logits.astype(np.float64).mean(axis=0)
    return state, loss


def strip_head(store: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
    return {k: v.copy() for k, v in store.items() if not k.startswith("head.")}


def pretrain(
    images: Sequence[RasterImage],
    cfg: vit.ViTConfig,
    dcfg: DinoConfig,
    rng: Rng,
    log_file: TextIO | None = None,
    on_step: Callable[[DinoState, StepStats], None] | None = None,
) -> dict[str, np.ndarray]:
    """Run the configured number of steps and return the teacher backbone.

    The teacher (the distilled target) provides the deployed extraction
    weights; its projection head is stripped. Batches cycle through a
    seed-determined shuffle of the image list.
    """
    if len(images) < dcfg.batch_size:
        raise ValueError(f"need at least {dcfg.batch_size} images, got {len(images)}")
    state = init(cfg, dcfg, rng)
    order: list[int] = []
    for _ in range(dcfg.steps):
        if len(order) < dcfg.batch_size:
            order = [int(i) for i in rng.permutation(len(images))]
        batch = [images[i] for i in order[: dcfg.batch_size]]
        order = order[dcfg.batch_size :]
        stats = StepStats(step=0, loss=0.0, teacher_entropy=0.0, center_norm=0.0)
        state, _ = train_step(state, batch, rng, dcfg, stats_out=stats)
        if log_file is not None:
            log_file.write(format_log_line(stats) + "\n")
        if on_step is not None:
            on_step(state, stats)
    return strip_head(state.teacher)
