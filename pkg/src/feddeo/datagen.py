"""Synthetic ground-truth world: Gaussian-mixture categories under per-domain transforms.

Category base mixtures live on a ring around the origin; each domain is an
affine transform (rotation, uniform scale, translation) applied to every base
mixture, so domains form well-separated islands with the same category layout
rotated and shifted. Densities are exact, which is what makes honest KL
measurement and Bayes-style sanity checks possible downstream.
"""

from __future__ import annotations

import csv
import hashlib
from dataclasses import dataclass, field

import numpy as np

from . import numerics as nm


class WorldError(Exception):
    """Invalid world construction or partition parameters."""


@dataclass
class GaussianComponent:
    mean: np.ndarray
    cov: np.ndarray
    weight: float

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=np.float64)
        self.cov = np.asarray(self.cov, dtype=np.float64)
        d = self.mean.shape[0]
        if self.cov.shape != (d, d):
            raise WorldError(f"component cov shape {self.cov.shape} != ({d}, {d})")
        if self.weight <= 0:
            raise WorldError(f"component weight must be positive, got {self.weight}")
        # fail fast on non-PD covariance; sampling needs the factor anyway
        try:
            np.linalg.cholesky(self.cov)
        except np.linalg.LinAlgError as exc:
            raise WorldError("component covariance is not positive definite") from exc


@dataclass
class DomainTransform:
    """Affine map x -> scale * R(rotation) x + translation, rotating the first two dims."""

    name: str
    translation: np.ndarray
    rotation: float = 0.0
    scale: float = 1.0

    def __post_init__(self):
        self.translation = np.asarray(self.translation, dtype=np.float64)
        if self.scale <= 0:
            raise WorldError(f"domain scale must be positive, got {self.scale}")
        if self.rotation != 0.0 and self.translation.shape[0] < 2:
            raise WorldError("rotation requires dim >= 2")

    def matrix(self, dim: int) -> np.ndarray:
        rot = np.eye(dim)
        if dim >= 2:
            c, s = np.cos(self.rotation), np.sin(self.rotation)
            rot[0, 0], rot[0, 1], rot[1, 0], rot[1, 1] = c, -s, s, c
        return self.scale * rot

    def apply(self, x: np.ndarray) -> np.ndarray:
        return np.asarray(x, dtype=np.float64) @ self.matrix(self.translation.shape[0]).T + self.translation

    def inverse(self, y: np.ndarray) -> np.ndarray:
        a_inv = np.linalg.inv(self.matrix(self.translation.shape[0]))
        return (np.asarray(y, dtype=np.float64) - self.translation) @ a_inv.T


@dataclass
class WorldSpec:
    """Full generative specification: exact densities, exact sampling."""

    n_categories: int
    n_domains: int
    dim: int
    seed: int
    categories: list[list[GaussianComponent]] = field(repr=False)
    domains: list[DomainTransform] = field(repr=False)

    def component_under(self, domain: int, comp: GaussianComponent) -> tuple[np.ndarray, np.ndarray]:
        """Transformed (mean, cov) of a base component under the domain map."""
        A = self.domains[domain].matrix(self.dim)
        return self.domains[domain].apply(comp.mean), A @ comp.cov @ A.T

    def density(self, domain: int, category: int, x: np.ndarray) -> np.ndarray:
        """Exact mixture pdf of the (domain, category) distribution at rows of x."""
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        out = np.zeros(x.shape[0])
        total_w = sum(c.weight for c in self.categories[category])
        for comp in self.categories[category]:
            mean, cov = self.component_under(domain, comp)
            diff = x - mean
            cov_inv = np.linalg.inv(cov)
            _, logdet = np.linalg.slogdet(cov)
            quad = np.einsum("ij,jk,ik->i", diff, cov_inv, diff)
            lognorm = -0.5 * (self.dim * np.log(2.0 * np.pi) + logdet)
            out += (comp.weight / total_w) * np.exp(lognorm - 0.5 * quad)
        return out

    def sample_pair(self, domain: int, category: int, n: int, rng: np.random.Generator) -> np.ndarray:
        """Draw n points from the (domain, category) mixture."""
        comps = self.categories[category]
        weights = np.array([c.weight for c in comps])
        weights = weights / weights.sum()
        choice = rng.choice(len(comps), size=n, p=weights)
        out = np.empty((n, self.dim))
        for j, comp in enumerate(comps):
            take = np.flatnonzero(choice == j)
            if take.size == 0:
                continue
            L = np.linalg.cholesky(comp.cov)
            base = comp.mean + rng.normal(size=(take.size, self.dim)) @ L.T
            out[take] = self.domains[domain].apply(base)
        return out

    def mode_centers(self) -> np.ndarray:
        """Transformed component means, one row per (domain, category, component)."""
        rows = [self.component_under(k, comp)[0]
                for k in range(self.n_domains)
                for cat in self.categories
                for comp in cat]
        return np.array(rows)

    def expected_client_mean(self, domain: int) -> np.ndarray:
        """E[x] for a uniform-over-categories draw from one domain (exact)."""
        base = np.zeros(self.dim)
        for cat in self.categories:
            total_w = sum(c.weight for c in cat)
            for comp in cat:
                base += comp.weight / total_w * comp.mean
        base /= self.n_categories
        return self.domains[domain].apply(base)

    def digest(self) -> str:
        h = hashlib.sha256()
        h.update(f"world:{self.n_categories}:{self.n_domains}:{self.dim}:{self.seed}".encode())
        for cat in self.categories:
            for comp in cat:
                h.update(comp.mean.tobytes())
                h.update(comp.cov.tobytes())
                h.update(np.float64(comp.weight).tobytes())
        for dom in self.domains:
            h.update(dom.name.encode())
            h.update(dom.translation.tobytes())
            h.update(np.float64(dom.rotation).tobytes())
            h.update(np.float64(dom.scale).tobytes())
        return h.hexdigest()


def make_world(n_categories: int = 10, n_domains: int = 6, dim: int = 2, sigma: float = 0.13,
               category_radius: float = 0.75, domain_radius: float = 2.2,
               rotation_step: float = 0.35, scale_spread: float = 0.06,
               components: int = 1, component_spread: float = 0.08,
               mean_jitter: float = 0.015, min_separation: float = 0.25,
               seed: int = 0) -> WorldSpec:
    """Build the default island world: category ring per domain, domains on a ring.

    Raises WorldError when the requested separation cannot be met, rather than
    silently producing an overlapping world.
    """
    if n_categories < 2:
        raise WorldError(f"need at least 2 categories, got {n_categories}")
    if n_domains < 1:
        raise WorldError(f"need at least 1 domain, got {n_domains}")
    if dim < 2:
        raise WorldError(f"need dim >= 2, got {dim}")
    if sigma <= 0 or components < 1:
        raise WorldError("sigma must be positive and components >= 1")
    rng = nm.stream(seed, "world")
    categories: list[list[GaussianComponent]] = []
    base_means = []
    for c in range(n_categories):
        angle = 2.0 * np.pi * c / n_categories
        base = np.zeros(dim)
        base[0] = category_radius * np.cos(angle)
        base[1] = category_radius * np.sin(angle)
        base[:2] += mean_jitter * rng.normal(size=2)
        base_means.append(base)
        comps = []
        for j in range(components):
            offset = np.zeros(dim)
            if components > 1:
                sub = 2.0 * np.pi * j / components + 0.5 * rng.random()
                offset[0] = component_spread * np.cos(sub)
                offset[1] = component_spread * np.sin(sub)
            comps.append(GaussianComponent(mean=base + offset,
                                           cov=sigma * sigma * np.eye(dim),
                                           weight=1.0 / components))
        categories.append(comps)
    means = np.array(base_means)
    dists = np.linalg.norm(means[:, None, :] - means[None, :, :], axis=2)
    np.fill_diagonal(dists, np.inf)
    worst = float(dists.min())
    if worst < min_separation:
        raise WorldError(
            f"category means separated by {worst:.4f} < required {min_separation}; "
            f"increase category_radius or reduce n_categories")
    domains = []
    for k in range(n_domains):
        angle = 2.0 * np.pi * k / n_domains
        translation = np.zeros(dim)
        translation[0] = domain_radius * np.cos(angle)
        translation[1] = domain_radius * np.sin(angle)
        domains.append(DomainTransform(
            name=f"domain{k}",
            translation=translation,
            rotation=rotation_step * k,
            scale=1.0 + scale_spread * np.sin(2.0 * k + 0.7)))
    return WorldSpec(n_categories=n_categories, n_domains=n_domains, dim=dim, seed=seed,
                     categories=categories, domains=domains)


# ---------------------------------------------------------------------------
# client partitions


@dataclass
class ClientDataset:
    """One client's local data plus the assignment that generated it."""

    client_id: int
    x: np.ndarray
    y: np.ndarray
    domain: np.ndarray        # generating domain index per row
    is_train: np.ndarray      # boolean mask per row
    assignment: dict[int, tuple[int, ...]]  # category -> generating domains

    @property
    def train_x(self) -> np.ndarray:
        return self.x[self.is_train]

    @property
    def train_y(self) -> np.ndarray:
        return self.y[self.is_train]

    @property
    def test_x(self) -> np.ndarray:
        return self.x[~self.is_train]

    @property
    def test_y(self) -> np.ndarray:
        return self.y[~self.is_train]

    @property
    def categories(self) -> list[int]:
        return sorted(self.assignment)

    def category_train_x(self, category: int) -> np.ndarray:
        return self.x[self.is_train & (self.y == category)]


def _spread_counts(total: int, bins: int) -> list[int]:
    """Split total into near-even integer bins, remainder to the earliest bins."""
    base, rem = divmod(total, bins)
    return [base + (1 if i < rem else 0) for i in range(bins)]


def _draw_client(world: WorldSpec, client_id: int, cats_domains: dict[int, tuple[int, ...]],
                 train_per_class: int, test_per_class: int, seed: int) -> ClientDataset:
    xs, ys, doms, mask = [], [], [], []
    for cat in sorted(cats_domains):
        domains = cats_domains[cat]
        for split, per_class, flag in (("train", train_per_class, True),
                                       ("test", test_per_class, False)):
            counts = _spread_counts(per_class, len(domains))
            for dom, cnt in zip(domains, counts):
                if cnt == 0:
                    continue
                rng = nm.stream(seed, "partition", client_id, cat, dom, split)
                pts = world.sample_pair(dom, cat, cnt, rng)
                xs.append(pts)
                ys.append(np.full(cnt, cat, dtype=np.int64))
                doms.append(np.full(cnt, dom, dtype=np.int64))
                mask.append(np.full(cnt, flag))
    return ClientDataset(client_id=client_id, x=np.vstack(xs), y=np.concatenate(ys),
                         domain=np.concatenate(doms), is_train=np.concatenate(mask),
                         assignment=dict(sorted(cats_domains.items())))


def partition_feature_skew(world: WorldSpec, n_clients: int, train_per_class: int = 200,
                           test_per_class: int = 100, seed: int = 0) -> list[ClientDataset]:
    """Each client holds every category, all drawn from its own domain."""
    if n_clients > world.n_domains:
        raise WorldError(f"feature skew needs one domain per client: {n_clients} > {world.n_domains}")
    if train_per_class < 1 or test_per_class < 1:
        raise WorldError("per-class sample counts must be >= 1")
    return [
        _draw_client(world, n, {c: (n,) for c in range(world.n_categories)},
                     train_per_class, test_per_class, seed)
        for n in range(n_clients)
    ]


def partition_label_skew(world: WorldSpec, n_clients: int, train_per_class: int = 200,
                         test_per_class: int = 100, seed: int = 0) -> list[ClientDataset]:
    """Categories split round-robin across clients; samples drawn evenly over all domains."""
    if n_clients > world.n_categories:
        raise WorldError(f"label skew needs at least one category per client: {n_clients} > {world.n_categories}")
    if train_per_class < world.n_domains or test_per_class < world.n_domains:
        raise WorldError(
            f"label skew draws every domain per category: need per-class counts >= {world.n_domains}")
    all_domains = tuple(range(world.n_domains))
    return [
        _draw_client(world, n,
                     {c: all_domains for c in range(world.n_categories) if c % n_clients == n},
                     train_per_class, test_per_class, seed)
        for n in range(n_clients)
    ]


# ---------------------------------------------------------------------------
# CSV interchange


def export_clients_csv(path, datasets: list[ClientDataset]) -> None:
    """Write all client rows to one CSV: ids, split, label, domain, coordinates."""
    dim = datasets[0].x.shape[1] if datasets else 0
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["client_id", "split", "label", "domain"] + [f"x{i}" for i in range(dim)])
        for ds in datasets:
            for i in range(ds.x.shape[0]):
                writer.writerow([ds.client_id, "train" if ds.is_train[i] else "test",
                                 int(ds.y[i]), int(ds.domain[i])]
                                + [repr(float(v)) for v in ds.x[i]])


def load_clients_csv(path) -> list[ClientDataset]:
    """Rebuild ClientDatasets from the CSV written by export_clients_csv."""
    rows: dict[int, list] = {}
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        dim = len(header) - 4
        for row in reader:
            rows.setdefault(int(row[0]), []).append(row)
    datasets = []
    for cid in sorted(rows):
        block = rows[cid]
        x = np.array([[float(v) for v in r[4:4 + dim]] for r in block])
        y = np.array([int(r[2]) for r in block], dtype=np.int64)
        dom = np.array([int(r[3]) for r in block], dtype=np.int64)
        mask = np.array([r[1] == "train" for r in block])
        assignment: dict[int, set[int]] = {}
        for lbl, d in zip(y, dom):
            assignment.setdefault(int(lbl), set()).add(int(d))
        datasets.append(ClientDataset(
            client_id=cid, x=x, y=y, domain=dom, is_train=mask,
            assignment={c: tuple(sorted(ds)) for c, ds in sorted(assignment.items())}))
    return datasets
