"""Factor categories, tuples, dataset descriptors and the observed/novel split."""

from __future__ import annotations

import enum
import itertools
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping

import yaml

CATEGORIES: tuple[str, ...] = ("lens", "sensor", "viewpoint", "domain")

# Short keys accepted in the CLI tuple string ("view=drone").
_ALIASES = {"lens": "lens", "sensor": "sensor", "view": "viewpoint", "viewpoint": "viewpoint",
            "domain": "domain"}
_SHORT = {"lens": "lens", "sensor": "sensor", "viewpoint": "view", "domain": "domain"}


class RegistryError(ValueError):
    pass


class TupleParseError(ValueError):
    pass


class Membership(str, enum.Enum):
    OBSERVED = "observed"
    NOVEL = "novel"
    INVALID = "invalid"


@dataclass(frozen=True)
class FactorCategory:
    id: str
    value_names: tuple[str, ...]

    def __post_init__(self):
        if self.id not in CATEGORIES:
            raise RegistryError(f"unknown factor category {self.id!r}")
        if not self.value_names:
            raise RegistryError(f"category {self.id} has no values")
        if len(set(self.value_names)) != len(self.value_names):
            raise RegistryError(f"category {self.id} has duplicate values")

    def index(self, value: str) -> int:
        return self.value_names.index(value)


@dataclass(frozen=True, order=True)
class FactorTuple:
    lens: str
    sensor: str
    viewpoint: str
    domain: str

    def __iter__(self):
        return iter((self.lens, self.sensor, self.viewpoint, self.domain))

    def __getitem__(self, category: str) -> str:
        return getattr(self, category)

    def replace(self, category: str, value: str) -> "FactorTuple":
        values = dict(zip(CATEGORIES, self))
        values[category] = value
        return FactorTuple(**values)

    def as_dict(self) -> dict[str, str]:
        return dict(zip(CATEGORIES, self))

    def to_string(self) -> str:
        return ",".join(f"{_SHORT[c]}={v}" for c, v in zip(CATEGORIES, self))

    @classmethod
    def parse(cls, text: str) -> "FactorTuple":
        """Parse ``"lens=fisheye,sensor=thermal,view=drone,domain=real"``."""
        values: dict[str, str] = {}
        for part in text.split(","):
            key, sep, value = part.strip().partition("=")
            if not sep or not value:
                raise TupleParseError(f"malformed tuple component {part!r}")
            category = _ALIASES.get(key.strip())
            if category is None:
                raise TupleParseError(f"unknown factor category {key!r}")
            if category in values:
                raise TupleParseError(f"category {category} given twice")
            values[category] = value.strip()
        missing = [c for c in CATEGORIES if c not in values]
        if missing:
            raise TupleParseError(f"missing categories: {', '.join(missing)}")
        return cls(**values)

    def __str__(self):
        return self.to_string()


@dataclass(frozen=True)
class DatasetDescriptor:
    id: str
    fixed_factors: Mapping[str, str]
    per_image_factors: Mapping[str, tuple[str, ...]] = field(default_factory=dict)
    sample_count: int = 0

    def __post_init__(self):
        fixed, varying = set(self.fixed_factors), set(self.per_image_factors)
        if fixed & varying:
            raise RegistryError(f"dataset {self.id}: {sorted(fixed & varying)} both fixed and per-image")
        if fixed | varying != set(CATEGORIES):
            raise RegistryError(f"dataset {self.id}: factors {sorted(set(CATEGORIES) - fixed - varying)} unspecified")
        for cat, values in self.per_image_factors.items():
            if not values or len(set(values)) != len(values):
                raise RegistryError(f"dataset {self.id}: per-image values for {cat} must be non-empty and unique")
        if self.sample_count < 0:
            raise RegistryError(f"dataset {self.id}: negative sample_count")

    def allowed(self, category: str) -> tuple[str, ...]:
        if category in self.fixed_factors:
            return (self.fixed_factors[category],)
        return tuple(self.per_image_factors[category])

    def tuples(self) -> list[FactorTuple]:
        return [FactorTuple(*combo) for combo in itertools.product(*(self.allowed(c) for c in CATEGORIES))]

    def carries(self, category: str, value: str) -> bool:
        return value in self.allowed(category)


@dataclass(frozen=True)
class FactorRegistry:
    categories: tuple[FactorCategory, ...]
    datasets: tuple[DatasetDescriptor, ...]

    def __post_init__(self):
        if tuple(c.id for c in self.categories) != CATEGORIES:
            raise RegistryError(f"categories must be exactly {CATEGORIES} in that order")
        ids = [d.id for d in self.datasets]
        if len(set(ids)) != len(ids):
            raise RegistryError("dataset ids must be unique")
        for d in self.datasets:
            for cat in CATEGORIES:
                for value in d.allowed(cat):
                    if value not in self.category(cat).value_names:
                        raise RegistryError(f"dataset {d.id}: {cat}={value!r} is not a known value")

    def category(self, cat: str) -> FactorCategory:
        return self.categories[CATEGORIES.index(cat)]

    def values(self, cat: str) -> tuple[str, ...]:
        return self.category(cat).value_names

    def cardinalities(self) -> tuple[int, ...]:
        return tuple(len(c.value_names) for c in self.categories)

    def dataset(self, dataset_id: str) -> DatasetDescriptor:
        for d in self.datasets:
            if d.id == dataset_id:
                return d
        raise KeyError(dataset_id)

    def is_valid(self, t: FactorTuple) -> bool:
        return all(v in self.values(c) for c, v in zip(CATEGORIES, t))

    def carriers(self, category: str, value: str) -> list[str]:
        return [d.id for d in self.datasets if d.carries(category, value)]

    def with_sample_count(self, count: int) -> "FactorRegistry":
        return FactorRegistry(self.categories, tuple(
            DatasetDescriptor(d.id, dict(d.fixed_factors), dict(d.per_image_factors), count)
            for d in self.datasets))

    # -- serialization -------------------------------------------------
    def to_dict(self) -> dict:
        return {
            "categories": {c.id: list(c.value_names) for c in self.categories},
            "datasets": [
                {
                    "id": d.id,
                    "fixed": dict(d.fixed_factors),
                    "per_image": {k: list(v) for k, v in d.per_image_factors.items()},
                    "samples": d.sample_count,
                }
                for d in self.datasets
            ],
        }

    @classmethod
    def from_dict(cls, data: Mapping) -> "FactorRegistry":
        try:
            cats = tuple(FactorCategory(c, tuple(data["categories"][c])) for c in CATEGORIES)
            datasets = tuple(
                DatasetDescriptor(
                    id=str(d["id"]),
                    fixed_factors={k: str(v) for k, v in (d.get("fixed") or {}).items()},
                    per_image_factors={k: tuple(map(str, v)) for k, v in (d.get("per_image") or {}).items()},
                    sample_count=int(d.get("samples", 0)),
                )
                for d in data["datasets"]
            )
        except (KeyError, TypeError) as exc:
            raise RegistryError(f"malformed registry: {exc}") from exc
        return cls(cats, datasets)

    def save(self, path: str | Path) -> None:
        Path(path).write_text(yaml.safe_dump(self.to_dict(), sort_keys=False), encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "FactorRegistry":
        return cls.from_dict(yaml.safe_load(Path(path).read_text(encoding="utf-8")))


def enumerate_full_space(registry: FactorRegistry) -> list[FactorTuple]:
    """All tuples of the cartesian product, lexicographic in category order."""
    return [FactorTuple(*combo) for combo in itertools.product(*(c.value_names for c in registry.categories))]


def observed_tuples(registry: FactorRegistry) -> set[FactorTuple]:
    # Per-image factors expand into distinct observed tuples.
    return {t for d in registry.datasets for t in d.tuples()}


def novel_tuples(registry: FactorRegistry) -> set[FactorTuple]:
    return set(enumerate_full_space(registry)) - observed_tuples(registry)


def validate_tuple(t: FactorTuple, registry: FactorRegistry) -> Membership:
    if not registry.is_valid(t):
        return Membership.INVALID
    return Membership.OBSERVED if t in observed_tuples(registry) else Membership.NOVEL


def sorted_tuples(tuples: Iterable[FactorTuple], registry: FactorRegistry) -> list[FactorTuple]:
    """Order tuples by the registry's value order (matches enumerate_full_space)."""
    def key(t):
        return tuple(registry.values(c).index(v) for c, v in zip(CATEGORIES, t))
    return sorted(tuples, key=key)


# ---------------------------------------------------------------------------
# Built-in registries

DEFAULT_VALUES = {
    "lens": ("normal", "fisheye"),
    "sensor": ("rgb", "thermal", "rgb-thermal", "gated", "event"),
    "viewpoint": ("front", "back", "side", "drone", "pole"),
    "domain": ("real", "simulation", "video-game"),
}

# (id, sensor, viewpoint(s), lens, domain). The first fifteen rows follow the
# coupled structure of the fifteen driving/surveillance datasets; the last five
# give every value a second carrier so overlap batches exist for all of them.
_DEFAULT_ROWS = [
    ("toy_daytime", "rgb", ("back", "front"), "normal", "real"),
    ("toy_thermal", "thermal", ("front",), "normal", "real"),
    ("toy_fisheye_fix", "rgb", ("pole",), "fisheye", "real"),
    ("toy_drone", "rgb", ("drone",), "normal", "real"),
    ("toy_simulation", "rgb", ("front",), "normal", "simulation"),
    ("toy_fisheye_car", "rgb", ("back", "front", "side"), "fisheye", "real"),
    ("toy_fusion", "rgb-thermal", ("front",), "normal", "real"),
    ("toy_video_game", "rgb", ("front",), "normal", "video-game"),
    ("toy_nighttime", "rgb", ("front",), "normal", "real"),
    ("toy_fisheye_indoor", "rgb", ("drone",), "fisheye", "real"),
    ("toy_gated", "gated", ("front",), "normal", "real"),
    ("toy_photoreal_sim", "rgb", ("front",), "normal", "simulation"),
    ("toy_thermal_fisheye", "thermal", ("pole",), "fisheye", "real"),
    ("toy_inclement", "rgb", ("front",), "normal", "real"),
    ("toy_event", "event", ("front",), "normal", "real"),
    ("toy_fusion_rear", "rgb-thermal", ("back",), "normal", "real"),
    ("toy_gated_sim", "gated", ("front",), "normal", "simulation"),
    ("toy_event_sim", "event", ("front",), "normal", "simulation"),
    ("toy_side_cam", "rgb", ("side",), "normal", "real"),
    ("toy_game_aerial", "rgb", ("drone",), "normal", "video-game"),
]


def default_registry(sample_count: int = 128) -> FactorRegistry:
    cats = tuple(FactorCategory(c, DEFAULT_VALUES[c]) for c in CATEGORIES)
    datasets = []
    for ds_id, sensor, views, lens, domain in _DEFAULT_ROWS:
        fixed = {"lens": lens, "sensor": sensor, "domain": domain}
        per_image = {}
        if len(views) == 1:
            fixed["viewpoint"] = views[0]
        else:
            per_image["viewpoint"] = views
        datasets.append(DatasetDescriptor(ds_id, fixed, per_image, sample_count))
    return FactorRegistry(cats, tuple(datasets))


def smoke_registry(sample_count: int = 16) -> FactorRegistry:
    """A 2x2x2x2 world with four coupled datasets, for fast tests."""
    cats = (
        FactorCategory("lens", ("normal", "fisheye")),
        FactorCategory("sensor", ("rgb", "thermal")),
        FactorCategory("viewpoint", ("front", "drone")),
        FactorCategory("domain", ("real", "simulation")),
    )
    rows = [
        ("smoke_a", {"lens": "normal", "sensor": "rgb", "domain": "real"}, {"viewpoint": ("front", "drone")}),
        ("smoke_b", {"lens": "fisheye", "sensor": "rgb", "viewpoint": "front", "domain": "simulation"}, {}),
        ("smoke_c", {"lens": "normal", "sensor": "thermal", "viewpoint": "drone", "domain": "simulation"}, {}),
        ("smoke_d", {"lens": "fisheye", "sensor": "thermal", "viewpoint": "front", "domain": "real"}, {}),
    ]
    return FactorRegistry(cats, tuple(DatasetDescriptor(i, f, p, sample_count) for i, f, p in rows))
