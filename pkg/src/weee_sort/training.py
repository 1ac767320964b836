"""Classifier construction, the early-stopped training loop, checkpoints and
inference.

The classifier is a registered backbone whose last layer is replaced by a
``num_classes``-way linear head; ``predict_proba`` applies softmax on top.
Training monitors validation accuracy once per epoch, keeps the best epoch
(earliest on ties) and stops after ``patience`` epochs without improvement.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import math
import struct
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch
import torch.nn as nn
from PIL import Image
from torch.utils.data import DataLoader, Dataset

from .augmentation import AugmentationPolicy, apply_augmentation, sample_params, sample_stream
from .dataset import CROP_SIZE, CropEntry, DatasetManifest, load_rgb
from .errors import ConfigError, DataError, TrainingError, WeightsUnavailableError
from .io import atomic_write_bytes, atomic_write_text

logger = logging.getLogger(__name__)

IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)
HISTORY_HEADER = ["epoch", "train_loss", "train_accuracy", "val_loss", "val_accuracy"]
CHECKPOINT_MAGIC = b"WEEECKPT"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class ModelConfig:
    backbone: str = "vgg16"
    pretrained: bool = True
    num_classes: int = 4
    input_size: int = CROP_SIZE
    freeze_backbone: bool = False

    def __post_init__(self):
        if self.backbone not in BACKBONES:
            raise ConfigError(f"unknown backbone {self.backbone!r}; registered: {sorted(BACKBONES)}")
        if self.num_classes < 2:
            raise ConfigError("num_classes must be >= 2")
        if self.input_size < 32:
            raise ConfigError("input_size must be >= 32")


@dataclass(frozen=True)
class TrainingConfig:
    max_epochs: int = 100
    patience: int = 10
    batch_size: int = 32
    learning_rate: float = 1e-3
    optimizer: str = "adam"
    loss: str = "categorical_cross_entropy"
    seed: int = 0
    monitor: str = "val_accuracy"
    num_workers: int = 0
    # reserved for class-weighted loss experiments; only None is accepted today
    weighted_loss: dict | None = None

    def __post_init__(self):
        if self.patience >= self.max_epochs:
            raise ConfigError("patience must be smaller than max_epochs")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if not self.learning_rate > 0:
            raise ConfigError("learning_rate must be positive")
        if self.optimizer != "adam":
            raise ConfigError(f"unsupported optimizer {self.optimizer!r}")
        if self.loss != "categorical_cross_entropy":
            raise ConfigError(f"unsupported loss {self.loss!r}")
        if self.monitor != "val_accuracy":
            raise ConfigError(f"unsupported monitor {self.monitor!r}")
        if self.weighted_loss is not None:
            raise ConfigError("weighted_loss is reserved and not implemented")


# -- backbones -----------------------------------------------------------------

def _vgg16(num_classes: int, pretrained: bool) -> nn.Module:
    from torchvision.models import VGG16_Weights, vgg16

    if pretrained:
        try:
            net = vgg16(weights=VGG16_Weights.IMAGENET1K_V1)
        except Exception as exc:  # download or cache failure, whatever the transport
            raise WeightsUnavailableError(
                f"ImageNet VGG-16 weights are not available ({type(exc).__name__}: {exc}). "
                "Place vgg16-397923af.pth in $TORCH_HOME/hub/checkpoints or set pretrained=false."
            ) from exc
    else:
        net = vgg16(weights=None)
    net.classifier[6] = nn.Linear(net.classifier[6].in_features, num_classes)
    return net


class SmallCNN(nn.Module):
    """Four conv blocks and a linear head; meant for desk-scale runs on CPU."""

    def __init__(self, num_classes: int, width: int = 16):
        super().__init__()
        layers, c_in = [], 3
        for c_out in (width, width * 2, width * 4, width * 4):
            layers += [nn.Conv2d(c_in, c_out, 3, padding=1), nn.BatchNorm2d(c_out),
                       nn.ReLU(inplace=True), nn.MaxPool2d(2)]
            c_in = c_out
        self.features = nn.Sequential(*layers, nn.AdaptiveAvgPool2d(1), nn.Flatten())
        self.head = nn.Linear(c_in, num_classes)

    def forward(self, x):
        return self.head(self.features(x))


def _small_cnn(num_classes: int, pretrained: bool) -> nn.Module:
    if pretrained:
        raise WeightsUnavailableError("small_cnn has no pretrained weights; set pretrained=false")
    return SmallCNN(num_classes)


BACKBONES: dict[str, Callable[[int, bool], nn.Module]] = {"vgg16": _vgg16, "small_cnn": _small_cnn}
HEAD_PREFIX = {"vgg16": "classifier.6.", "small_cnn": "head."}


class Classifier(nn.Module):
    """Backbone plus input normalization; ``forward`` returns logits."""

    def __init__(self, net: nn.Module, config: ModelConfig, classes: Sequence[str],
                 class_mapping: dict[str, str] | None = None):
        super().__init__()
        if len(classes) != config.num_classes:
            raise ConfigError(f"{len(classes)} class names for a {config.num_classes}-way head")
        self.net = net
        self.config = config
        self.classes = tuple(classes)
        # dataset label -> model label, e.g. the battery/other collapse
        self.class_mapping = dict(class_mapping) if class_mapping else None
        mean, std = (IMAGENET_MEAN, IMAGENET_STD) if config.pretrained else ((0, 0, 0), (1, 1, 1))
        self.register_buffer("mean", torch.tensor(mean, dtype=torch.float32).view(1, 3, 1, 1))
        self.register_buffer("std", torch.tensor(std, dtype=torch.float32).view(1, 3, 1, 1))

    def forward(self, x):
        return self.net((x - self.mean) / self.std)

    @torch.no_grad()
    def predict_proba(self, x):
        return torch.softmax(self(x), dim=1)

    def head_parameters(self) -> list[str]:
        prefix = "net." + HEAD_PREFIX[self.config.backbone]
        return [n for n, _ in self.named_parameters() if n.startswith(prefix)]


def build_classifier(config: ModelConfig, classes: Sequence[str] | None = None,
                     seed: int | None = None, class_mapping: dict[str, str] | None = None
                     ) -> Classifier:
    if seed is not None:
        torch.manual_seed(seed)
    if classes is None:
        classes = [f"class{i}" for i in range(config.num_classes)]
    model = Classifier(BACKBONES[config.backbone](config.num_classes, config.pretrained),
                       config, classes, class_mapping)
    if config.freeze_backbone:
        head = set(model.head_parameters())
        for name, p in model.named_parameters():
            p.requires_grad = name in head
    return model


# -- history and early stopping -----------------------------------------------

@dataclass(frozen=True)
class EpochRecord:
    epoch: int
    train_loss: float
    train_accuracy: float
    val_loss: float
    val_accuracy: float


@dataclass
class TrainingHistory:
    records: list[EpochRecord] = field(default_factory=list)
    best_epoch: int = 0
    stopped_epoch: int = 0

    def monitored(self) -> list[float]:
        return [r.val_accuracy for r in self.records]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(HISTORY_HEADER)
        for r in self.records:
            w.writerow([r.epoch, repr(r.train_loss), repr(r.train_accuracy),
                        repr(r.val_loss), repr(r.val_accuracy)])
        return buf.getvalue()


def write_history(history: TrainingHistory, path) -> None:
    atomic_write_text(path, history.to_csv())


def read_history(path) -> list[EpochRecord]:
    """Parse a history CSV; errors name the offending row."""
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0] != HISTORY_HEADER:
        raise DataError(f"{path}: header must be {','.join(HISTORY_HEADER)}")
    out = []
    for lineno, row in enumerate(rows[1:], start=2):
        if not row:
            continue
        try:
            if len(row) != len(HISTORY_HEADER):
                raise ValueError(f"expected {len(HISTORY_HEADER)} fields, got {len(row)}")
            rec = EpochRecord(int(row[0]), *(float(v) for v in row[1:]))
            if not all(math.isfinite(v) for v in row_values(rec)):
                raise ValueError("non-finite value")
        except ValueError as exc:
            raise DataError(f"{path}: bad history row {lineno}: {','.join(row)} ({exc})") from None
        out.append(rec)
    if not out:
        raise DataError(f"{path}: history has no rows")
    return out


def row_values(rec: EpochRecord) -> tuple[float, ...]:
    return rec.train_loss, rec.train_accuracy, rec.val_loss, rec.val_accuracy


def should_stop(monitored: Sequence[float] | TrainingHistory, patience: int) -> tuple[bool, int]:
    """Return (stop, best_epoch) for a 1-indexed series of monitored values.

    The best epoch is the earliest maximum; training stops once the current
    epoch is ``patience`` or more epochs past it.
    """
    values = monitored.monitored() if isinstance(monitored, TrainingHistory) else list(monitored)
    if not values:
        raise ValueError("should_stop needs at least one epoch")
    best = int(np.argmax(values)) + 1  # argmax returns the first maximum
    return len(values) - best >= patience, best


def run_epochs(step: Callable[[int], EpochRecord], max_epochs: int, patience: int,
               on_improve: Callable[[EpochRecord], None] | None = None) -> TrainingHistory:
    """Drive ``step(epoch)`` until early stopping or ``max_epochs``."""
    history = TrainingHistory()
    for epoch in range(1, max_epochs + 1):
        record = step(epoch)
        values = (record.train_loss, record.val_loss)
        if not all(math.isfinite(v) for v in values):
            history.records.append(record)
            raise TrainingError(f"non-finite loss at epoch {epoch}: {record}", record)
        history.records.append(record)
        stop, best = should_stop(history, patience)
        if best == epoch and on_improve is not None:
            on_improve(record)
        history.best_epoch = best
        history.stopped_epoch = epoch
        if stop:
            break
    return history


# -- data ----------------------------------------------------------------------

class CropDataset(Dataset):
    """Crops from a manifest split as normalized-later float tensors in [0, 1].

    When ``policy`` is enabled each item is augmented with a stream derived
    from (seed, epoch, index); set ``epoch`` before each pass.
    """

    def __init__(self, manifest: DatasetManifest, entries: Sequence[CropEntry],
                 classes: Sequence[str], input_size: int,
                 policy: AugmentationPolicy | None = None, seed: int = 0, cache: bool = True):
        self.manifest = manifest
        self.entries = list(entries)
        self.class_index = {c: i for i, c in enumerate(classes)}
        self.input_size = input_size
        self.policy = policy
        self.seed = seed
        self.epoch = 0
        self._cache = {} if cache else None
        unknown = {e.class_label for e in self.entries} - set(self.class_index)
        if unknown:
            raise DataError(f"manifest classes {sorted(unknown)} unknown to the model {list(classes)}")

    @property
    def augmenting(self) -> bool:
        return self.policy is not None and self.policy.enabled

    def __len__(self):
        return len(self.entries)

    def _pixels(self, i: int) -> np.ndarray:
        if self._cache is not None and i in self._cache:
            return self._cache[i]
        px = load_rgb(str(self.manifest.resolve(self.entries[i])))
        if px.shape != (CROP_SIZE, CROP_SIZE, 3):
            raise DataError(f"{self.entries[i].path}: crop is {px.shape}, expected 500x500x3")
        if self._cache is not None:
            self._cache[i] = px
        return px

    def __getitem__(self, i):
        px = self._pixels(i)
        if self.augmenting:
            params = sample_params(self.policy, sample_stream(self.seed, self.epoch, i))
            px = apply_augmentation(px, params, self.policy)
        return to_tensor(px, self.input_size), self.class_index[self.entries[i].class_label]


def to_tensor(pixels: np.ndarray, input_size: int) -> torch.Tensor:
    if pixels.shape[:2] != (input_size, input_size):
        pixels = np.asarray(Image.fromarray(pixels).resize((input_size, input_size), Image.BILINEAR))
    return torch.from_numpy(np.array(pixels, copy=True)).permute(2, 0, 1).float().div_(255.0)


def _run_pass(model, loader, loss_fn, optimizer=None):
    training = optimizer is not None
    if not training:
        # validation and test batches are never augmented
        assert not loader.dataset.augmenting, "augmentation enabled on an evaluation pass"
    model.train(training)
    total_loss, correct, seen = 0.0, 0, 0
    with torch.set_grad_enabled(training):
        for x, y in loader:
            logits = model(x)
            loss = loss_fn(logits, y)
            if training:
                optimizer.zero_grad()
                loss.backward()
                optimizer.step()
            total_loss += loss.item() * len(y)
            correct += int((logits.argmax(1) == y).sum())
            seen += len(y)
    return total_loss / seen, correct / seen


def train(model: Classifier, manifest: DatasetManifest, policy: AugmentationPolicy,
          config: TrainingConfig, out_dir, progress: Callable[[EpochRecord], None] | None = None
          ) -> tuple[TrainingHistory, Path]:
    """Fit ``model`` on the manifest's train split, validating on its val split.

    The best epoch's weights are written to ``out_dir/best.ckpt`` whenever the
    monitored accuracy improves and are loaded back into ``model`` at the end.
    Returns the history and the checkpoint path.
    """
    train_entries, val_entries = manifest.split("train"), manifest.split("val")
    if not train_entries or not val_entries:
        raise DataError(f"need non-empty train and val splits, got "
                        f"{len(train_entries)} train / {len(val_entries)} val")
    out_dir = Path(out_dir)
    ckpt_path = out_dir / "best.ckpt"
    torch.manual_seed(config.seed)
    classes = model.classes
    size = model.config.input_size
    train_ds = CropDataset(manifest, train_entries, classes, size, policy, config.seed)
    val_ds = CropDataset(manifest, val_entries, classes, size, None, config.seed)
    gen = torch.Generator().manual_seed(config.seed)
    train_dl = DataLoader(train_ds, config.batch_size, shuffle=True, generator=gen,
                          num_workers=config.num_workers)
    val_dl = DataLoader(val_ds, config.batch_size, shuffle=False, num_workers=config.num_workers)
    optimizer = torch.optim.Adam([p for p in model.parameters() if p.requires_grad],
                                 lr=config.learning_rate)
    loss_fn = nn.CrossEntropyLoss()
    best_state = {}

    def step(epoch):
        train_ds.epoch = epoch
        tl, ta = _run_pass(model, train_dl, loss_fn, optimizer)
        vl, va = _run_pass(model, val_dl, loss_fn)
        rec = EpochRecord(epoch, tl, ta, vl, va)
        logger.info("epoch %d: loss %.4f acc %.4f val_loss %.4f val_acc %.4f", epoch, tl, ta, vl, va)
        if progress:
            progress(rec)
        return rec

    def on_improve(rec):
        best_state["weights"] = {k: v.detach().clone() for k, v in model.state_dict().items()}
        save_checkpoint(ckpt_path, model, config, rec.epoch, {"val_accuracy": rec.val_accuracy,
                                                               "val_loss": rec.val_loss})

    history = run_epochs(step, config.max_epochs, config.patience, on_improve)
    if best_state:
        model.load_state_dict(best_state["weights"])
    model.eval()
    return history, ckpt_path


# -- checkpoints ----------------------------------------------------------------

def save_checkpoint(path, model: Classifier, training_config: TrainingConfig | None,
                    epoch: int, metrics: dict | None = None) -> None:
    """Single file: magic, 8-byte header length, JSON header, torch state dict."""
    metrics = metrics or {}
    header = {
        "format_version": CHECKPOINT_VERSION,
        "model_config": asdict(model.config),
        "training_config": asdict(training_config) if training_config else None,
        "classes": list(model.classes),
        "class_mapping": model.class_mapping,
        "epoch": epoch,
        "val_accuracy": metrics.get("val_accuracy"),
        "metrics": metrics,
    }
    head = json.dumps(header, sort_keys=True).encode("utf-8")
    buf = io.BytesIO()
    torch.save(model.state_dict(), buf)
    atomic_write_bytes(path, CHECKPOINT_MAGIC + struct.pack("<Q", len(head)) + head + buf.getvalue())


def read_checkpoint_header(path) -> dict:
    return _read_checkpoint(path)[0]


def _read_checkpoint(path):
    data = Path(path).read_bytes()
    if not data.startswith(CHECKPOINT_MAGIC):
        raise DataError(f"{path}: not a checkpoint file")
    n = struct.unpack_from("<Q", data, len(CHECKPOINT_MAGIC))[0]
    start = len(CHECKPOINT_MAGIC) + 8
    header = json.loads(data[start:start + n].decode("utf-8"))
    if header.get("format_version") != CHECKPOINT_VERSION:
        raise DataError(f"{path}: checkpoint format {header.get('format_version')!r}, "
                        f"expected {CHECKPOINT_VERSION}")
    return header, data[start + n:]


def load_checkpoint(path) -> tuple[Classifier, dict]:
    header, payload = _read_checkpoint(path)
    known = {f.name for f in fields(ModelConfig)}
    cfg = ModelConfig(**{k: v for k, v in header["model_config"].items() if k in known})
    # the stored weights replace any initialization, so skip fetching pretrained ones
    model = Classifier(BACKBONES[cfg.backbone](cfg.num_classes, False), cfg, header["classes"],
                       header.get("class_mapping"))
    state = torch.load(io.BytesIO(payload), map_location="cpu", weights_only=True)
    model.load_state_dict(state)
    model.eval()
    return model, header


# -- inference -------------------------------------------------------------------

def predict(model: Classifier, crops, batch_size: int = 32) -> list[tuple[str, np.ndarray]]:
    """Class name and probability vector for each 500x500x3 uint8 crop."""
    model.eval()
    out = []
    batch = []

    def flush():
        probs = model.predict_proba(torch.stack(batch)).numpy()
        out.extend((model.classes[int(np.argmax(p))], p) for p in probs)
        batch.clear()

    for px in crops:
        px = np.asarray(px)
        if px.shape != (CROP_SIZE, CROP_SIZE, 3):
            raise ValueError(f"crops must be {CROP_SIZE}x{CROP_SIZE}x3, got {px.shape}")
        batch.append(to_tensor(px.astype(np.uint8, copy=False), model.config.input_size))
        if len(batch) == batch_size:
            flush()
    if batch:
        flush()
    return out


def predict_split(model: Classifier, manifest: DatasetManifest, split: str
                  ) -> tuple[list[str], list[str]]:
    """(actual, predicted) class names for every crop in one manifest split."""
    entries = manifest.split(split)
    if not entries:
        raise DataError(f"split {split!r} is empty")
    actual = [e.class_label for e in entries]
    images = (load_rgb(str(manifest.resolve(e))) for e in entries)
    predicted = [cls for cls, _ in predict(model, images)]
    return actual, predicted
