"""INI-style global configuration.

Every section and key is optional; anything not listed below is rejected so
typos fail loudly. Example::

    [general]
    taxonomy_version = cmr-35-v1
    seed = 7

    [vendor_map]            # manufacturer substring = vendor, first hit wins
    philips = VendorA
    siemens = VendorB

    [labels]
    label_map_path = my_labels.map
    min_class_count = 20

    [split]
    train_fraction = 0.64
    val_fraction = 0.16
    test_fraction = 0.20

    [train]
    epochs = 30
    lr_min = 1e-4
    lr_max = 0.01
    cycle_epochs = 10

    [model]
    input_size = 128
"""
from __future__ import annotations

import configparser
from dataclasses import dataclass, field, replace
from pathlib import Path

from .dataset import AugmentSpec, OversampleSpec, SplitSpec
from .dicom import DEFAULT_VENDOR_MAP, Vendor, VendorMap
from .errors import ConfigError
from .labeling import TAXONOMY_VERSION, LabelMap
from .nn.optim import CyclicLRSpec
from .training import TrainConfig

_SECTIONS = {
    "general": {"taxonomy_version", "seed"},
    "vendor_map": None,  # free-form keys
    "labels": {"label_map_path", "min_class_count"},
    "split": {"train_fraction", "val_fraction", "test_fraction", "seed"},
    "oversample": {"class_max_ratio", "vendor_max_ratio", "seed"},
    "augment": {
        "noise_sigma_max", "contrast_gamma_min", "contrast_gamma_max", "rotation_max_deg", "scale_min",
        "scale_max", "translate_max_frac", "deform_grid", "deform_max_px", "channel_shuffle", "seed",
    },
    "train": {"epochs", "batch_size", "lr_min", "lr_max", "cycle_epochs", "seed", "checkpoint_dir", "val_every",
              "dropout_rate"},
    "model": {"input_size"},
}


@dataclass(frozen=True)
class GlobalConfig:
    vendor_map: VendorMap = DEFAULT_VENDOR_MAP
    label_map_path: Path | None = None
    min_class_count: int = 20
    split: SplitSpec = field(default_factory=SplitSpec)
    oversample: OversampleSpec = field(default_factory=OversampleSpec)
    augment: AugmentSpec = field(default_factory=AugmentSpec)
    train: TrainConfig = field(default_factory=TrainConfig)
    taxonomy_version: str = TAXONOMY_VERSION

    def __post_init__(self):
        if self.taxonomy_version != TAXONOMY_VERSION:
            raise ConfigError(f"config targets taxonomy {self.taxonomy_version!r}, this build is {TAXONOMY_VERSION!r}")
        if self.min_class_count < 1:
            raise ConfigError("min_class_count must be >= 1")

    @property
    def input_size(self) -> int:
        return self.train.input_size

    def label_map(self) -> LabelMap:
        return LabelMap.default() if self.label_map_path is None else LabelMap.load(self.label_map_path)

    def with_seed(self, seed: int) -> "GlobalConfig":
        """Override every seed in the configuration."""
        return replace(
            self,
            split=replace(self.split, seed=seed),
            oversample=replace(self.oversample, seed=seed),
            augment=replace(self.augment, seed=seed),
            train=replace(self.train, seed=seed, oversample=replace(self.oversample, seed=seed),
                          augment=replace(self.augment, seed=seed)),
        )

    @classmethod
    def from_file(cls, path: str | Path) -> "GlobalConfig":
        path = Path(path)
        try:
            text = path.read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        return cls.from_text(text, base_dir=path.parent)

    @classmethod
    def from_text(cls, text: str, base_dir: Path | None = None) -> "GlobalConfig":
        cp = configparser.ConfigParser(delimiters=("=",), comment_prefixes=("#", ";"), inline_comment_prefixes=("#",),
                                       interpolation=None)
        try:
            cp.read_string(text)
        except configparser.Error as exc:
            raise ConfigError(f"config syntax: {exc}") from exc
        for section in cp.sections():
            if section not in _SECTIONS:
                raise ConfigError(f"unknown config section [{section}]")
            allowed = _SECTIONS[section]
            if allowed is not None:
                unknown = set(cp[section]) - allowed
                if unknown:
                    raise ConfigError(f"unknown keys in [{section}]: {sorted(unknown)}")
        try:
            return _build(cp, base_dir or Path("."))
        except ValueError as exc:
            if isinstance(exc, ConfigError):
                raise
            raise ConfigError(str(exc)) from exc


def _get(cp, section, key, conv, default):
    if not cp.has_option(section, key):
        return default
    raw = cp.get(section, key)
    if conv is bool:
        return cp.getboolean(section, key)
    return conv(raw)


def _build(cp: configparser.ConfigParser, base_dir: Path) -> GlobalConfig:
    seed = _get(cp, "general", "seed", int, None)

    def seeded(section, default=0):
        return _get(cp, section, "seed", int, seed if seed is not None else default)

    vendor_map = DEFAULT_VENDOR_MAP
    if cp.has_section("vendor_map"):
        try:
            vendor_map = VendorMap.from_pairs([(k, Vendor(v.strip())) for k, v in cp["vendor_map"].items()])
        except ValueError as exc:
            raise ConfigError(f"[vendor_map]: {exc}") from exc

    label_path = _get(cp, "labels", "label_map_path", str, None)
    if label_path is not None:
        label_path = Path(label_path)
        if not label_path.is_absolute():
            label_path = base_dir / label_path

    split = SplitSpec(
        _get(cp, "split", "train_fraction", float, 0.64),
        _get(cp, "split", "val_fraction", float, 0.16),
        _get(cp, "split", "test_fraction", float, 0.20),
        seeded("split"),
    )
    over = OversampleSpec(
        _get(cp, "oversample", "class_max_ratio", float, 4.0),
        _get(cp, "oversample", "vendor_max_ratio", float, 2.0),
        seeded("oversample"),
    )
    ad = AugmentSpec()
    aug = AugmentSpec(
        _get(cp, "augment", "noise_sigma_max", float, ad.noise_sigma_max),
        (_get(cp, "augment", "contrast_gamma_min", float, ad.contrast_gamma_range[0]),
         _get(cp, "augment", "contrast_gamma_max", float, ad.contrast_gamma_range[1])),
        _get(cp, "augment", "rotation_max_deg", float, ad.rotation_max_deg),
        (_get(cp, "augment", "scale_min", float, ad.scale_range[0]),
         _get(cp, "augment", "scale_max", float, ad.scale_range[1])),
        _get(cp, "augment", "translate_max_frac", float, ad.translate_max_frac),
        _get(cp, "augment", "deform_grid", int, ad.deform_grid),
        _get(cp, "augment", "deform_max_px", float, ad.deform_max_px),
        _get(cp, "augment", "channel_shuffle", bool, ad.channel_shuffle),
        seeded("augment"),
    )
    td = TrainConfig()
    ck = _get(cp, "train", "checkpoint_dir", str, None)
    if ck is not None and not Path(ck).is_absolute():
        ck = base_dir / ck
    train = TrainConfig(
        epochs=_get(cp, "train", "epochs", int, td.epochs),
        batch_size=_get(cp, "train", "batch_size", int, td.batch_size),
        lr=CyclicLRSpec(
            _get(cp, "train", "lr_min", float, td.lr.lr_min),
            _get(cp, "train", "lr_max", float, td.lr.lr_max),
            _get(cp, "train", "cycle_epochs", float, td.lr.cycle_epochs),
        ),
        oversample=over,
        augment=aug,
        seed=seeded("train"),
        checkpoint_dir=None if ck is None else Path(ck),
        val_every=_get(cp, "train", "val_every", int, td.val_every),
        input_size=_get(cp, "model", "input_size", int, td.input_size),
        dropout_rate=_get(cp, "train", "dropout_rate", float, td.dropout_rate),
    )
    if train.input_size < 16 or train.input_size % 16:
        raise ConfigError("input_size must be a positive multiple of 16")
    return GlobalConfig(
        vendor_map=vendor_map,
        label_map_path=label_path,
        min_class_count=_get(cp, "labels", "min_class_count", int, 20),
        split=split,
        oversample=over,
        augment=aug,
        train=train,
        taxonomy_version=_get(cp, "general", "taxonomy_version", str, TAXONOMY_VERSION),
    )


def config_fields() -> dict[str, set[str] | None]:
    """Accepted sections and keys (``None`` = free-form)."""
    return dict(_SECTIONS)

