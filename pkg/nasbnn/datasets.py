"""
Dataset ingestion for NAS-BNN.
CIFAR-10 and ImageNet-style class folders through torchvision, plus a seeded
synthetic set; every dataset gets a per-class held-out split.
"""
import logging
from pathlib import Path
from typing import Callable, Iterator, NamedTuple, Optional, Tuple

import numpy as np
import torch
from torch.utils.data import DataLoader, Dataset as TorchDataset, TensorDataset
from torchvision import datasets, transforms

from . import NasBnnError
from .config import DatasetDescriptor, data_dir
from .evosearch import SplitError, build_val_split

logger = logging.getLogger(__name__)

CIFAR10_MEAN = (0.4914, 0.4822, 0.4465)
CIFAR10_STD = (0.2470, 0.2435, 0.2616)
IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)
CROP_PADDING = 4


class DatasetError(NasBnnError):
    """Missing, corrupt or malformed dataset."""
    pass


class DataSplit(NamedTuple):
    """
    A view over a torch dataset: the rows in `indices`, read lazily.

    `targets` holds the label of every source row so splits can be carved
    without decoding images.
    """
    source: TorchDataset
    targets: torch.Tensor
    indices: torch.Tensor
    train_transform: Callable
    eval_transform: Callable
    num_workers: int = 0

    def __len__(self) -> int:
        return int(self.indices.numel())

    @property
    def labels(self) -> torch.Tensor:
        return self.targets[self.indices]

    def subset(self, indices) -> "DataSplit":
        index = torch.as_tensor(np.asarray(indices, dtype=np.int64), dtype=torch.long)
        # NamedTuple._replace checks len(), which __len__ above redefines as the row count
        return DataSplit(self.source, self.targets, self.indices[index], self.train_transform,
                         self.eval_transform, self.num_workers)

    def batches(self, batch_size: int, seed: Optional[int] = None, augment: bool = False,
                drop_last: bool = False) -> Iterator[Tuple[torch.Tensor, torch.Tensor]]:
        """
        Normalized (images, labels) batches from a DataLoader.

        Args:
            batch_size: Images per batch
            seed: Shuffle and augmentation seed; None keeps the stored order
            augment: Apply the training transform instead of the evaluation one
            drop_last: Skip a final short batch
        """
        # the loader draws its worker base seed from this generator even when not shuffling
        generator = torch.Generator().manual_seed(seed or 0)
        loader = DataLoader(_TransformedView(self, augment, seed or 0), batch_size=batch_size,
                            shuffle=seed is not None, generator=generator, drop_last=drop_last,
                            num_workers=self.num_workers)
        return iter(loader)


class _TransformedView(TorchDataset):
    """Rows of a split with its transform applied; random transforms are seeded per row."""

    def __init__(self, split: DataSplit, augment: bool, seed: int):
        self.split = split
        self.augment = augment
        self.seed = seed

    def __len__(self) -> int:
        return len(self.split)

    def __getitem__(self, i: int):
        row = int(self.split.indices[i])
        image, _ = self.split.source[row]
        label = int(self.split.targets[row])
        if not self.augment:
            return self.split.eval_transform(image), label
        # same crops for the same (seed, row) whatever the worker count or global RNG
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(self.seed * 1_000_003 + row)
            return self.split.train_transform(image), label


class Dataset(NamedTuple):
    name: str
    num_classes: int
    train: DataSplit
    val: DataSplit
    test: Optional[DataSplit] = None


def _split(source: TorchDataset, targets, train_transform: Callable, eval_transform: Callable,
           num_workers: int = 0) -> DataSplit:
    targets = torch.as_tensor(targets, dtype=torch.long)
    return DataSplit(source, targets, torch.arange(len(targets)), train_transform, eval_transform, num_workers)


# ============================================================================
# SOURCES
# ============================================================================

def load_cifar10(root: Optional[Path] = None, download: bool = True,
                 num_workers: int = 0) -> Tuple[DataSplit, DataSplit]:
    """50,000 training and 10,000 test images, 10 classes."""
    root = Path(root) if root else data_dir() / "cifar10"
    normalize = transforms.Normalize(CIFAR10_MEAN, CIFAR10_STD)
    train_transform = transforms.Compose([
        transforms.RandomCrop(32, padding=CROP_PADDING),
        transforms.RandomHorizontalFlip(),
        transforms.ToTensor(),
        normalize,
    ])
    eval_transform = transforms.Compose([transforms.ToTensor(), normalize])
    try:
        train = datasets.CIFAR10(str(root), train=True, download=download)
        test = datasets.CIFAR10(str(root), train=False, download=download)
    except (RuntimeError, OSError) as e:
        raise DatasetError(f"CIFAR-10 unavailable under {root}: {e}")
    return (_split(train, train.targets, train_transform, eval_transform, num_workers),
            _split(test, test.targets, train_transform, eval_transform, num_workers))


def _image_folder(root: Path) -> datasets.ImageFolder:
    if not root.is_dir():
        raise DatasetError(f"dataset directory not found: {root}")
    try:
        return datasets.ImageFolder(str(root))
    except FileNotFoundError as e:
        raise DatasetError(f"cannot index images under {root}: {e}")


def load_folder(root: Path, image_size: int,
                num_workers: int = 0) -> Tuple[DataSplit, Optional[DataSplit], int]:
    """`root/<class>/*` or `root/train/<class>/*` with an optional `root/test/<class>/*`, decoded lazily."""
    root = Path(root)
    normalize = transforms.Normalize(IMAGENET_MEAN, IMAGENET_STD)
    train_transform = transforms.Compose([
        transforms.RandomResizedCrop(image_size),
        transforms.RandomHorizontalFlip(),
        transforms.ToTensor(),
        normalize,
    ])
    eval_transform = transforms.Compose([
        transforms.Resize(image_size * 8 // 7),
        transforms.CenterCrop(image_size),
        transforms.ToTensor(),
        normalize,
    ])
    train_root = root / "train" if (root / "train").is_dir() else root
    train_folder = _image_folder(train_root)
    train = _split(train_folder, train_folder.targets, train_transform, eval_transform, num_workers)
    test = None
    if (root / "test").is_dir():
        test_folder = _image_folder(root / "test")
        if test_folder.classes != train_folder.classes:
            raise DatasetError(f"test classes under {root / 'test'} differ from training classes")
        test = _split(test_folder, test_folder.targets, train_transform, eval_transform, num_workers)
    return train, test, len(train_folder.classes)


def synthetic(n: int, num_classes: int, image_size: int = 32, seed: int = 0, channels: int = 3) -> DataSplit:
    """Seeded uint8 images: a per-class prototype plus noise, balanced labels."""
    generator = torch.Generator().manual_seed(seed)
    prototypes = torch.rand(num_classes, channels, image_size, image_size, generator=generator)
    labels = torch.arange(n) % num_classes
    labels = labels[torch.randperm(n, generator=generator)]
    noise = torch.rand(n, channels, image_size, image_size, generator=generator)
    images = ((0.6 * prototypes[labels] + 0.4 * noise) * 255).round().to(torch.uint8)
    normalize = transforms.Normalize((0.5,) * channels, (0.25,) * channels)
    to_float = transforms.ConvertImageDtype(torch.float32)
    train_transform = transforms.Compose([
        transforms.RandomCrop(image_size, padding=CROP_PADDING),
        transforms.RandomHorizontalFlip(),
        to_float,
        normalize,
    ])
    return _split(TensorDataset(images, labels), labels, train_transform, transforms.Compose([to_float, normalize]))


# ============================================================================
# INGESTION
# ============================================================================

def ingest_dataset(desc: DatasetDescriptor) -> Dataset:
    """Load the described dataset and carve the per-class held-out split from its training images."""
    test: Optional[DataSplit] = None
    if desc.kind == "cifar10":
        train, test = load_cifar10(Path(desc.root) if desc.root else None, desc.download, desc.num_workers)
        num_classes = 10
    elif desc.kind == "folder":
        root = Path(desc.root)
        if not root.is_absolute() and not root.exists():
            root = data_dir() / root
        train, test, num_classes = load_folder(root, desc.image_size, desc.num_workers)
    else:
        train = synthetic(desc.num_samples, desc.num_classes, desc.image_size, desc.seed)
        test = synthetic(max(desc.num_samples // 4, desc.num_classes), desc.num_classes, desc.image_size,
                         desc.seed + 1)
        num_classes = desc.num_classes

    if desc.subset is not None:
        train = train.subset(np.arange(min(desc.subset, len(train))))

    try:
        train_idx, val_idx = build_val_split(train.labels.numpy(), desc.val_per_class, desc.seed)
    except SplitError as e:
        raise DatasetError(f"cannot build the held-out split: {e}")
    logger.info("dataset %s: %d train / %d held-out / %s test images, %d classes", desc.kind,
                len(train_idx), len(val_idx), len(test) if test is not None else "no", num_classes)
    return Dataset(desc.kind, num_classes, train.subset(train_idx), train.subset(val_idx), test)
