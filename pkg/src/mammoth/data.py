"""Synthetic bag datasets emulating multi-concept slide structure.

Instances are Gaussian samples around K well-separated concept means;
each bag mixes concepts by a Dirichlet-drawn composition and gets its
label from a rule over the realized concept fractions:

  presence(c, rho)            label 1 iff fraction of concept c >= rho
  co_occurrence(c1, c2, rho)  label 1 iff both fractions >= rho
  majority                    label = most frequent concept id

Generation alternates desired labels and rejection-resamples the
composition (and assignments) until the realized label matches, which
keeps two-class datasets essentially balanced.

Bag file format (little-endian): magic "MILB", version u8=1, N u32,
D u32, label i32, N*D float32 features row-major, N uint16 concept ids.
The dataset manifest is a CSV of path,label,split.
"""

from __future__ import annotations

import csv
import os
import struct
from dataclasses import dataclass, field, asdict

import numpy as np

from .errors import BagParseError, ConfigError

MAGIC = b"MILB"
VERSION = 1

DEFAULT_RULE = "co_occurrence:0,1,0.2"


@dataclass
class LabelRule:
    kind: str                       # presence | co_occurrence | majority
    concepts: tuple = ()
    rho: float = 0.5

    @classmethod
    def parse(cls, text: str) -> "LabelRule":
        """Parse 'presence:c,rho' / 'co_occurrence:c1,c2,rho' / 'majority'."""
        head, _, rest = text.partition(":")
        if head == "majority":
            if rest:
                raise ConfigError("majority rule takes no arguments")
            return cls("majority")
        parts = rest.split(",") if rest else []
        try:
            if head == "presence" and len(parts) == 2:
                return cls("presence", (int(parts[0]),), float(parts[1]))
            if head == "co_occurrence" and len(parts) == 3:
                return cls("co_occurrence", (int(parts[0]), int(parts[1])), float(parts[2]))
        except ValueError as exc:
            raise ConfigError(f"bad rule argument in {text!r}: {exc}") from exc
        raise ConfigError(f"unknown rule {text!r}")

    def __post_init__(self):
        if self.kind != "majority" and not 0.0 < self.rho < 1.0:
            raise ConfigError(f"rho must be in (0, 1), got {self.rho}")

    @property
    def num_classes(self) -> int:
        return 0 if self.kind == "majority" else 2  # majority: set by K

    def label(self, assignments: np.ndarray, k: int) -> int:
        counts = np.bincount(assignments, minlength=k)
        frac = counts / assignments.size
        if self.kind == "presence":
            return int(frac[self.concepts[0]] >= self.rho)
        if self.kind == "co_occurrence":
            c1, c2 = self.concepts
            return int(frac[c1] >= self.rho and frac[c2] >= self.rho)
        return int(counts.argmax())


@dataclass
class SynthSpec:
    concepts: int = 8               # K
    dim: int = 64                   # D
    sigma: float = 1.0
    sep: float = 6.0                # min pairwise mean distance, units of sigma
    n_range: tuple = (64, 256)
    mix: float = 0.2                # Dirichlet concentration; sparse bags
                                    # put negatives at one-concept corners
    rule: str = DEFAULT_RULE
    train_bags: int = 200
    val_bags: int = 50
    test_bags: int = 50
    seed: int = 0

    def __post_init__(self):
        if self.sep <= 0:
            raise ConfigError(f"sep must be > 0, got {self.sep}")
        if self.concepts < 2:
            raise ConfigError(f"need K >= 2 concepts, got {self.concepts}")
        self.parsed_rule = LabelRule.parse(self.rule)

    @property
    def num_classes(self) -> int:
        return self.concepts if self.parsed_rule.kind == "majority" else 2

    def to_dict(self):
        d = asdict(self)
        d.pop("parsed_rule", None)
        return d


@dataclass
class Bag:
    features: np.ndarray            # N x D float32
    label: int
    concept_assignments: np.ndarray  # N uint16, ground truth for evaluation only
    bag_id: str = ""


def make_concepts(k: int, dim: int, sep: float, rng, sigma: float = 1.0,
                  attempts: int = 1000) -> np.ndarray:
    """K mean vectors, centered and rescaled to min pairwise distance sep*sigma."""
    if k > 2 ** dim:
        raise ConfigError(f"cannot separate {k} concepts in {dim} dimensions")
    for _ in range(attempts):
        means = rng.standard_normal((k, dim))
        means -= means.mean(axis=0)
        diff = means[:, None, :] - means[None, :, :]
        dist = np.sqrt((diff ** 2).sum(axis=2))
        min_dist = dist[np.triu_indices(k, 1)].min()
        if min_dist > 1e-9:
            return means * (sep * sigma / min_dist)
    raise ConfigError(f"could not satisfy separation {sep} after {attempts} attempts")


def _draw_assignments(spec: SynthSpec, rng) -> np.ndarray:
    n = int(rng.integers(spec.n_range[0], spec.n_range[1] + 1))
    composition = rng.dirichlet(np.full(spec.concepts, spec.mix))
    return rng.choice(spec.concepts, size=n, p=composition)


def sample_bag(spec: SynthSpec, concept_means: np.ndarray, rng,
               desired_label: int | None = None, bag_id: str = "",
               max_tries: int = 10_000) -> Bag:
    """One bag; when desired_label is given, compositions are
    rejection-resampled until the rule produces that label."""
    rule = spec.parsed_rule
    for _ in range(max_tries):
        assignments = _draw_assignments(spec, rng)
        label = rule.label(assignments, spec.concepts)
        if desired_label is None or label == desired_label:
            noise = rng.standard_normal((assignments.size, spec.dim)) * spec.sigma
            feats = (concept_means[assignments] + noise).astype(np.float32)
            return Bag(feats, label, assignments.astype(np.uint16), bag_id)
    raise ConfigError(
        f"could not realize label {desired_label} under rule {spec.rule!r} "
        f"in {max_tries} tries; the rule/mix combination is too extreme")


def generate_dataset(spec: SynthSpec, rng) -> dict:
    """All splits of a dataset; desired labels alternate for balance."""
    means = make_concepts(spec.concepts, spec.dim, spec.sep, rng, spec.sigma)
    num_classes = spec.num_classes
    splits = {}
    counter = 0
    for split, count in (("train", spec.train_bags), ("val", spec.val_bags),
                         ("test", spec.test_bags)):
        bags = []
        for i in range(count):
            bag_id = f"{split}_{i:04d}"
            bags.append(sample_bag(spec, means, rng,
                                   desired_label=counter % num_classes,
                                   bag_id=bag_id))
            counter += 1
        splits[split] = bags
    return {"concept_means": means, "splits": splits}


# ---------------------------------------------------------------------------
# conflicting-label construction for gradient-interference analysis
# ---------------------------------------------------------------------------

def make_conflicting_bags(dim: int, bags_per_class: int, n_per_bag: int, rng,
                          sep: float = 6.0, sigma: float = 1.0,
                          minority_frac: float = 0.2) -> list:
    """Two concepts pushing opposite classes, mixed inside every bag.

    Bags labeled 0 are dominated by concept A with a minority of concept
    B, and vice versa, so a shared layer receives conflicting per-instance
    gradients while clusters stay cleanly separable.
    """
    means = make_concepts(2, dim, sep, rng, sigma)
    bags = []
    for label in (0, 1):
        major = label
        for i in range(bags_per_class):
            n_minor = int(round(minority_frac * n_per_bag))
            assignments = np.array([major] * (n_per_bag - n_minor)
                                   + [1 - major] * n_minor)
            rng.shuffle(assignments)
            feats = (means[assignments]
                     + rng.standard_normal((n_per_bag, dim)) * sigma).astype(np.float32)
            bags.append(Bag(feats, label, assignments.astype(np.uint16),
                            f"conflict_{label}_{i:03d}"))
    return bags


# ---------------------------------------------------------------------------
# binary bag files and the dataset manifest
# ---------------------------------------------------------------------------

def write_bag(bag: Bag, path):
    n, d = bag.features.shape
    payload = (MAGIC + struct.pack("<BIIi", VERSION, n, d, bag.label)
               + bag.features.astype("<f4").tobytes()
               + bag.concept_assignments.astype("<u2").tobytes())
    tmp = str(path) + ".tmp"
    with open(tmp, "wb") as fh:
        fh.write(payload)
    os.replace(tmp, path)


def read_bag(path) -> Bag:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != MAGIC:
        raise BagParseError(f"bad magic at byte 0: {blob[:4]!r} != {MAGIC!r}")
    if len(blob) < 17:
        raise BagParseError(f"truncated header: file ends at byte {len(blob)}, need 17")
    version, n, d, label = struct.unpack("<BIIi", blob[4:17])
    if version != VERSION:
        raise BagParseError(f"unsupported version {version} at byte 4")
    feat_bytes = 4 * n * d
    assign_bytes = 2 * n
    expected = 17 + feat_bytes + assign_bytes
    if len(blob) != expected:
        raise BagParseError(
            f"truncated payload: file ends at byte {len(blob)}, expected {expected}")
    feats = np.frombuffer(blob, dtype="<f4", count=n * d, offset=17).reshape(n, d)
    assigns = np.frombuffer(blob, dtype="<u2", count=n, offset=17 + feat_bytes)
    return Bag(feats.copy(), int(label), assigns.copy(),
               os.path.splitext(os.path.basename(str(path)))[0])


def write_dataset(dataset: dict, out_dir):
    """Bag files plus manifest.csv (path,label,split); returns manifest path."""
    os.makedirs(out_dir, exist_ok=True)
    rows = []
    for split, bags in dataset["splits"].items():
        for bag in bags:
            rel = f"{bag.bag_id}.milb"
            write_bag(bag, os.path.join(out_dir, rel))
            rows.append((rel, bag.label, split))
    manifest = os.path.join(out_dir, "manifest.csv")
    tmp = manifest + ".tmp"
    with open(tmp, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["path", "label", "split"])
        writer.writerows(rows)
    os.replace(tmp, manifest)
    return manifest


def load_manifest(manifest_path) -> dict:
    """Read manifest + bag files; returns {split: [Bag, ...]}."""
    base = os.path.dirname(os.path.abspath(str(manifest_path)))
    splits: dict[str, list] = {"train": [], "val": [], "test": []}
    with open(manifest_path, newline="") as fh:
        reader = csv.DictReader(fh)
        for row in reader:
            if row["split"] not in splits:
                raise ConfigError(f"unknown split {row['split']!r} in manifest")
            bag = read_bag(os.path.join(base, row["path"]))
            if bag.label != int(row["label"]):
                raise ConfigError(
                    f"label mismatch for {row['path']}: manifest says {row['label']}, "
                    f"file says {bag.label}")
            splits[row["split"]].append(bag)
    return splits
