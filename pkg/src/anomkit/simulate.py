"""Ground-truth anomaly synthesis.

A small variational autoencoder learns the normal-data distribution over
the one-hot encoding; synthetic anomalies are produced by inflating a
random subset of features of sampled normal points and accepted when
their reconstruction log-likelihood drops below a threshold derived from
the sampled normals. The per-feature likelihood drop, clamped at zero,
is the anomaly's ground-truth importance vector.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from sklearn.mixture import GaussianMixture
from torch import nn

from .dataio import (
    CATEGORICAL,
    REAL,
    DataError,
    DatasetTable,
    FeatureSchema,
    NormalizationState,
    OneHotLayout,
    Point,
    build_layout,
    encode_point,
    encode_table,
    fit_normalizer,
    save_csv,
)

LOG_2PI = math.log(2.0 * math.pi)
LOGVAR_BOUND = 12.0
MAX_GMM_COMPONENTS = 5
LOCAL_BAND_SIGMAS = 2.0
MAX_LOCAL_DRAWS = 10_000


class SimulationError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    """Generative-model training settings.

    The "paper" preset uses the full-size architecture; "desk" is the
    default reduced configuration for interactive-scale runs.
    """

    hidden: tuple[int, ...] = (64, 32)
    latent: int = 8
    epochs: int = 300
    batch_size: int = 256
    lr: float = 5e-4
    seed: int = 0


PRESETS = {
    "desk": TrainConfig(),
    "paper": TrainConfig(hidden=(500, 200), latent=15, epochs=1500),
}


class _VAENet(nn.Module):
    """Fully-connected encoder/decoder; both heads emit mean and log-variance
    (decoder output width is twice the data width)."""

    def __init__(self, width: int, hidden: tuple[int, ...], latent: int):
        super().__init__()
        enc: list[nn.Module] = []
        prev = width
        for h in hidden:
            enc += [nn.Linear(prev, h), nn.ReLU()]
            prev = h
        enc.append(nn.Linear(prev, 2 * latent))
        self.encoder = nn.Sequential(*enc)

        dec: list[nn.Module] = []
        prev = latent
        for h in reversed(hidden):
            dec += [nn.Linear(prev, h), nn.ReLU()]
            prev = h
        dec.append(nn.Linear(prev, 2 * width))
        self.decoder = nn.Sequential(*dec)
        self.width = width
        self.latent = latent

    def encode(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        out = self.encoder(x)
        mu, logvar = out.chunk(2, dim=-1)
        return mu, torch.clamp(logvar, -LOGVAR_BOUND, LOGVAR_BOUND)

    def decode(self, z: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        out = self.decoder(z)
        mu, logvar = out.chunk(2, dim=-1)
        return mu, torch.clamp(logvar, -LOGVAR_BOUND, LOGVAR_BOUND)


def elbo_loss(net: _VAENet, x: torch.Tensor, eps: torch.Tensor) -> torch.Tensor:
    """Negative evidence lower bound (mean per point) with a standard-normal
    latent prior; eps supplies the reparameterization noise so the value is
    deterministic given its inputs."""
    mu_z, logvar_z = net.encode(x)
    z = mu_z + eps * torch.exp(0.5 * logvar_z)
    mu_x, logvar_x = net.decode(z)
    recon_nll = 0.5 * (logvar_x + (x - mu_x) ** 2 / torch.exp(logvar_x) + LOG_2PI).sum(dim=-1)
    kl = 0.5 * (torch.exp(logvar_z) + mu_z**2 - 1.0 - logvar_z).sum(dim=-1)
    return (recon_nll + kl).mean()


@dataclass
class GenModel:
    net: _VAENet
    schema: FeatureSchema
    normalizer: NormalizationState
    layout: OneHotLayout
    config: TrainConfig
    loss_history: list[float] = field(default_factory=list)

    @property
    def width(self) -> int:
        return self.layout.width


def train_genmodel(normals: DatasetTable, config: TrainConfig | str = "desk") -> GenModel:
    """Fit the generative model on normal points by minimizing the negative
    evidence lower bound with Adam."""
    if isinstance(config, str):
        config = PRESETS[config]
    if normals.n_rows == 0:
        raise DataError("cannot train on an empty dataset")
    if normals.labels is not None and any(l == 1 for l in normals.labels):
        raise DataError("training data must contain only inliers")

    normalizer = fit_normalizer(normals)
    layout = build_layout(normals.schema)
    x_all = torch.from_numpy(encode_table(normals, normalizer, layout)).double()

    torch.manual_seed(config.seed)
    net = _VAENet(layout.width, config.hidden, config.latent).double()
    optimizer = torch.optim.Adam(net.parameters(), lr=config.lr)
    gen = torch.Generator().manual_seed(config.seed)

    n = x_all.shape[0]
    losses: list[float] = []
    for epoch in range(config.epochs):
        perm = torch.randperm(n, generator=gen)
        epoch_loss = 0.0
        for start in range(0, n, config.batch_size):
            batch = x_all[perm[start : start + config.batch_size]]
            eps = torch.randn(batch.shape[0], config.latent, generator=gen, dtype=torch.float64)
            loss = elbo_loss(net, batch, eps)
            if not torch.isfinite(loss):
                raise SimulationError(
                    f"non-finite training loss at epoch {epoch} (last finite: {losses[-1] if losses else 'none'})"
                )
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            epoch_loss += float(loss.detach()) * batch.shape[0]
        losses.append(epoch_loss / n)

    return GenModel(net, normals.schema, normalizer, layout, config, losses)


def log_px_given_z(model: GenModel, x_encoded: np.ndarray, z: np.ndarray) -> float:
    """Gaussian log-density of an encoded point under the decoder's
    mean/variance at z, summed over dimensions."""
    with torch.no_grad():
        mu, logvar = model.net.decode(torch.as_tensor(z, dtype=torch.float64))
        x = torch.as_tensor(x_encoded, dtype=torch.float64)
        ll = -0.5 * (logvar + (x - mu) ** 2 / torch.exp(logvar) + LOG_2PI).sum()
    return float(ll)


def sample_normals(model: GenModel, m: int, seed: int):
    """Draw m latents from the prior and decode them.

    Real coordinates are sampled from the decoder Gaussian; each
    categorical block takes its maximum-probability value. Returns the
    decoded points, their encoded vectors, and the retained latents.
    """
    gen = torch.Generator().manual_seed(seed)
    z = torch.randn(m, model.net.latent, generator=gen, dtype=torch.float64)
    with torch.no_grad():
        mu, logvar = model.net.decode(z)
        noise = torch.randn(mu.shape, generator=gen, dtype=torch.float64)
        sampled = mu + noise * torch.exp(0.5 * logvar)
    encoded = sampled.numpy().copy()
    mu_np = mu.numpy()

    blocks = model.layout.blocks()
    for fi, f in enumerate(model.schema.features):
        if f.kind == CATEGORICAL:
            cols = blocks[fi]
            winners = np.argmax(mu_np[:, cols], axis=1)
            encoded[:, cols] = 0.0
            encoded[np.arange(m), [cols[w] for w in winners]] = 1.0

    points = [_decode_encoded(model, encoded[i]) for i in range(m)]
    return points, encoded, z.numpy()


def _decode_encoded(model: GenModel, vec: np.ndarray) -> Point:
    values: list = []
    col = 0
    for f in model.schema.features:
        if f.kind == REAL:
            lo, hi = model.normalizer.range_of(f.name)
            values.append(float(lo if hi == lo else lo + vec[col] * (hi - lo)))
            col += 1
        else:
            block = vec[col : col + len(f.values)]
            values.append(f.values[int(np.argmax(block))])
            col += len(f.values)
    return Point(tuple(values))


def log_px_given_z_batch(model: GenModel, x_encoded: np.ndarray, z: np.ndarray) -> np.ndarray:
    """log_px_given_z over aligned rows of encoded points and latents."""
    with torch.no_grad():
        mu, logvar = model.net.decode(torch.as_tensor(z, dtype=torch.float64))
        x = torch.as_tensor(x_encoded, dtype=torch.float64)
        ll = -0.5 * (logvar + (x - mu) ** 2 / torch.exp(logvar) + LOG_2PI).sum(dim=-1)
    return ll.numpy()


def compute_threshold(model: GenModel, encoded_normals: np.ndarray, latents: np.ndarray, epsilon: float) -> float:
    """Scaled minimum log-likelihood of the sampled normals."""
    if len(encoded_normals) == 0:
        raise SimulationError("cannot set a threshold without sampled normals")
    return epsilon * float(log_px_given_z_batch(model, encoded_normals, latents).min())


# -- feature inflation ----------------------------------------------------------


@dataclass(frozen=True)
class RealMarginal:
    """Best-BIC Gaussian mixture of one real feature plus its data range."""

    means: np.ndarray
    stds: np.ndarray
    weights: np.ndarray
    lo: float
    hi: float


@dataclass(frozen=True)
class CategoricalMarginal:
    counts: tuple[tuple[str, int], ...]

    def least_frequent(self) -> str:
        observed = [(n, v) for v, n in self.counts if n > 0]
        if len(observed) < 2:
            raise SimulationError("single-value categorical feature cannot be inflated")
        return min(observed, key=lambda t: (t[0], t[1]))[1]


@dataclass(frozen=True)
class InflationPolicy:
    """Which fraction of features to inflate and how far."""

    fraction: float = 1.0 / 3.0
    local_variance_multiplier: float = 3.0
    global_range_multiplier: float = 1.2


def build_marginals(data: DatasetTable, seed: int = 0) -> dict[str, RealMarginal | CategoricalMarginal]:
    """Per-feature marginal models on raw values: a BIC-selected Gaussian
    mixture for real features, an empirical frequency table otherwise."""
    out: dict[str, RealMarginal | CategoricalMarginal] = {}
    for i, f in enumerate(data.schema.features):
        col = [p.values[i] for p in data.rows]
        if f.kind == REAL:
            values = np.asarray(col, dtype=float).reshape(-1, 1)
            best = None
            for g in range(1, min(MAX_GMM_COMPONENTS, len(values)) + 1):
                gmm = GaussianMixture(n_components=g, random_state=seed).fit(values)
                bic = gmm.bic(values)
                if best is None or bic < best[0]:
                    best = (bic, gmm)
            gmm = best[1]
            out[f.name] = RealMarginal(
                means=gmm.means_.ravel().copy(),
                stds=np.sqrt(gmm.covariances_.ravel().copy()),
                weights=gmm.weights_.copy(),
                lo=float(values.min()),
                hi=float(values.max()),
            )
        else:
            counts: dict[str, int] = {v: 0 for v in f.values}
            for v in col:
                counts[v] += 1
            out[f.name] = CategoricalMarginal(tuple(sorted(counts.items())))
    return out


def inflate_value(
    marginal: RealMarginal | CategoricalMarginal,
    mode: str,
    policy: InflationPolicy,
    rng: np.random.Generator,
):
    """One inflated value for a feature.

    local: resample from the variance-widened mixture until the draw falls
    outside every component's band of +-2 standard deviations. global:
    uniform over the data range symmetrically widened by the range
    multiplier. categorical: the least-frequent observed value.
    """
    if isinstance(marginal, CategoricalMarginal):
        return marginal.least_frequent()
    if mode == "global":
        center = (marginal.lo + marginal.hi) / 2.0
        half = (marginal.hi - marginal.lo) / 2.0 * policy.global_range_multiplier
        return float(rng.uniform(center - half, center + half))
    if mode == "local":
        widened = marginal.stds * math.sqrt(policy.local_variance_multiplier)
        for _ in range(MAX_LOCAL_DRAWS):
            comp = rng.choice(len(marginal.weights), p=marginal.weights)
            draw = rng.normal(marginal.means[comp], widened[comp])
            outside = np.all(np.abs(draw - marginal.means) > LOCAL_BAND_SIGMAS * marginal.stds)
            if outside:
                return float(draw)
        raise SimulationError("local inflation failed to leave the component bands")
    raise ValueError(f"unknown inflation mode {mode!r}")


def inflate_feature(
    x: Point,
    j: int,
    mode: str,
    marginals: dict,
    schema: FeatureSchema,
    policy: InflationPolicy,
    rng: np.random.Generator,
) -> Point:
    """Copy of x with feature j replaced by an inflated value."""
    values = list(x.values)
    values[j] = inflate_value(marginals[schema.features[j].name], mode, policy, rng)
    return Point(tuple(values))


# -- synthesis -------------------------------------------------------------------


@dataclass
class SimBundle:
    """Simulator output: synthetic normals, accepted anomalies, per-anomaly
    ground-truth importances (zero off the inflated set), the acceptance
    threshold, and each anomaly's final log-likelihood."""

    schema: FeatureSchema
    normals: tuple[Point, ...]
    anomalies: tuple[Point, ...]
    importances: np.ndarray        # (k, n_features)
    threshold: float
    anomaly_loglik: np.ndarray     # (k,)

    def combined_table(self) -> DatasetTable:
        rows = self.normals + self.anomalies
        labels = (0,) * len(self.normals) + (1,) * len(self.anomalies)
        return DatasetTable(self.schema, rows, labels)

    def importances_json(self) -> list[dict]:
        names = self.schema.names
        return [
            {
                "row": len(self.normals) + i,
                "weights": {names[j]: float(w) for j, w in enumerate(self.importances[i])},
            }
            for i in range(len(self.anomalies))
        ]

    def save(self, out_dir: str | Path) -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        save_csv(self.combined_table(), out / "data.csv", out / "schema.json")
        (out / "importances.json").write_text(
            json.dumps(self.importances_json(), indent=2) + "\n", encoding="utf-8"
        )
        (out / "meta.json").write_text(
            json.dumps(
                {
                    "threshold": self.threshold,
                    "n_normals": len(self.normals),
                    "n_anomalies": len(self.anomalies),
                    "anomaly_loglik": [float(s) for s in self.anomaly_loglik],
                },
                indent=2,
            )
            + "\n",
            encoding="utf-8",
        )


def synthesize(
    model: GenModel,
    marginals: dict,
    m: int,
    k: int,
    epsilon: float = 0.5,
    policy: InflationPolicy | None = None,
    seed: int = 0,
) -> SimBundle:
    """Generate m synthetic normals and k labeled anomalies.

    Per candidate: sample a normal point with its latent, inflate the
    chosen feature subset, record each feature's likelihood drop (clamped
    at zero) against the uninflated point, and accept the candidate when
    its joint log-likelihood falls below the threshold. Aborts if 100 * k
    consecutive candidates are rejected.
    """
    policy = policy or InflationPolicy()
    rng = np.random.default_rng(seed)
    schema = model.schema
    d = schema.n_features
    n_inflate = max(1, round(d * policy.fraction))

    # single-value categorical features cannot be inflated and are excluded
    inflatable = []
    for j, f in enumerate(schema.features):
        if f.kind == REAL:
            inflatable.append(j)
        else:
            marg = marginals[f.name]
            if sum(1 for _, n in marg.counts if n > 0) >= 2:
                inflatable.append(j)
    if not inflatable and k > 0:
        raise SimulationError("no inflatable features")

    normal_points, encoded_normals, latents = sample_normals(model, m, seed)
    threshold = compute_threshold(model, encoded_normals, latents, epsilon)

    anomalies: list[Point] = []
    importances: list[np.ndarray] = []
    logliks: list[float] = []
    consecutive_rejects = 0
    candidate_seed = seed + 1
    while len(anomalies) < k:
        x_list, x_enc, z_arr = sample_normals(model, 1, candidate_seed)
        candidate_seed += 1
        x, z = x_list[0], z_arr[0]
        base_ll = log_px_given_z(model, x_enc[0], z)

        chosen = np.sort(rng.choice(inflatable, size=min(n_inflate, len(inflatable)), replace=False))
        e = np.zeros(d)
        candidate_values = list(x.values)
        for j in chosen:
            j = int(j)
            mode = "categorical"
            if schema.features[j].kind == REAL:
                mode = "local" if rng.random() < 0.5 else "global"
            inflated = inflate_feature(x, j, mode, marginals, schema, policy, rng)
            inflated_enc = encode_point(inflated, schema, model.normalizer, model.layout)
            e[j] = max(0.0, base_ll - log_px_given_z(model, inflated_enc, z))
            candidate_values[j] = inflated.values[j]

        candidate = Point(tuple(candidate_values))
        candidate_enc = encode_point(candidate, schema, model.normalizer, model.layout)
        s = log_px_given_z(model, candidate_enc, z)
        if s < threshold:
            anomalies.append(candidate)
            importances.append(e)
            logliks.append(s)
            consecutive_rejects = 0
        else:
            consecutive_rejects += 1
            if k > 0 and consecutive_rejects >= 100 * k:
                rate = consecutive_rejects / (consecutive_rejects + len(anomalies))
                raise SimulationError(
                    f"acceptance stalled: {consecutive_rejects} consecutive rejections "
                    f"(rejection rate {rate:.3f}); epsilon={epsilon} is likely too tight"
                )

    return SimBundle(
        schema=schema,
        normals=tuple(normal_points),
        anomalies=tuple(anomalies),
        importances=np.array(importances) if importances else np.zeros((0, d)),
        threshold=threshold,
        anomaly_loglik=np.array(logliks),
    )


def load_truth_importances(path: str | Path, schema: FeatureSchema) -> tuple[list[int], np.ndarray]:
    """Read an importances JSON file back into row indices and a weight matrix."""
    docs = json.loads(Path(path).read_text(encoding="utf-8"))
    rows = [int(doc["row"]) for doc in docs]
    mat = np.zeros((len(docs), schema.n_features))
    for i, doc in enumerate(docs):
        for name, w in doc["weights"].items():
            mat[i, schema.index_of(name)] = float(w)
    return rows, mat
