"""Counterfactual row generation with a variational autoencoder.

The model is trained on the joint outcome/treatment/control row, new rows
are produced by re-encoding each real row and resampling its latent code,
and the generated sample is gated on distribution-match metrics before
being merged with the real panel.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
import pandas as pd

from . import nn
from .errors import ConvergenceError, DomainError, NumericError, SchemaError
from .panel import PanelTable

MODELED_ROLES = ("outcome", "treatment", "control", "mediator")

GENERATED_FIRM_PREFIX = "cf::"


@dataclass(frozen=True)
class FeatureNorms:
    """Per-column standardization statistics of the training sample."""

    columns: tuple[str, ...]
    means: np.ndarray
    sds: np.ndarray      # constant columns carry sd 1 so the transform is invertible

    def standardize(self, frame: pd.DataFrame) -> np.ndarray:
        x = frame[list(self.columns)].to_numpy(dtype=float)
        return (x - self.means) / self.sds

    def destandardize(self, z: np.ndarray) -> np.ndarray:
        return z * self.sds + self.means


@dataclass
class VaeModel:
    encoder: nn.Mlp          # row -> (mu, log variance), concatenated
    decoder: nn.Mlp          # latent -> reconstructed row
    latent_dim: int
    beta: float
    feature_norms: FeatureNorms
    binary_columns: tuple[str, ...]
    col_min: np.ndarray      # observed bounds in original units
    col_max: np.ndarray
    seed: int = 0

    def __post_init__(self):
        width = len(self.feature_norms.columns)
        if self.encoder.output_dim != 2 * self.latent_dim:
            raise SchemaError("encoder must emit mean and log-variance per latent dim")
        if self.decoder.input_dim != self.latent_dim:
            raise SchemaError("decoder input must match the latent dimension")
        if self.decoder.output_dim != width or self.encoder.input_dim != width:
            raise SchemaError("encoder/decoder row width must match the modeled columns")
        if self.beta <= 0:
            raise DomainError(f"beta must be positive, got {self.beta}")

    def encode(self, batch_std: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        h = nn.forward(self.encoder, batch_std).output
        return h[:, : self.latent_dim], h[:, self.latent_dim:]


@dataclass(frozen=True)
class Gates:
    smd: float = 0.1
    mae: float = 0.1
    mse: float = 0.05


@dataclass(frozen=True)
class VaeConfig:
    latent_dim: int = 8
    beta: float = 1.0
    epochs: int = 300
    batch_size: int = 128
    learning_rate: float = 1e-3
    hidden: tuple[int, ...] = (32, 32)
    seed: int = 0
    gates: Gates = field(default_factory=Gates)
    mode: str = "encode_resample"

    @classmethod
    def from_dict(cls, raw: dict) -> "VaeConfig":
        kwargs = dict(raw)
        if "gates" in kwargs:
            kwargs["gates"] = Gates(**kwargs["gates"])
        if "hidden" in kwargs:
            kwargs["hidden"] = tuple(kwargs["hidden"])
        return cls(**kwargs)


@dataclass
class QualityReport:
    """Per-feature gaps between the real and generated samples."""

    smd: dict[str, float]
    mae: dict[str, float]
    mse: dict[str, float]
    gates: Gates
    passed: bool

    def to_dict(self) -> dict:
        return {
            "smd": self.smd, "mae": self.mae, "mse": self.mse,
            "gates": {"smd": self.gates.smd, "mae": self.gates.mae, "mse": self.gates.mse},
            "passed": self.passed,
        }


def _elbo_parts(model: VaeModel, batch: np.ndarray, noise: np.ndarray):
    enc_trace = nn.forward(model.encoder, batch)
    h = enc_trace.output
    mu = h[:, : model.latent_dim]
    logvar = h[:, model.latent_dim:]
    sigma = np.exp(0.5 * logvar)
    z = mu + sigma * noise
    dec_trace = nn.forward(model.decoder, z)
    xhat = dec_trace.output
    diff = xhat - batch
    recon = float(np.mean(diff * diff))
    kl_rows = 0.5 * np.sum(mu * mu + sigma * sigma - 1.0 - logvar, axis=1)
    kl = float(np.mean(kl_rows))
    for name, val in (("reconstruction", recon), ("kl", kl)):
        if not np.isfinite(val):
            raise NumericError(f"non-finite {name} term in the batch objective")
    return enc_trace, dec_trace, mu, logvar, sigma, diff, recon, kl


def elbo_loss(model: VaeModel, batch, noise) -> tuple[float, float, float]:
    """Batch objective: elementwise reconstruction MSE + beta-weighted KL.

    The latent sample is mu + sigma * noise (reparameterization); KL is the
    batch mean of the per-row closed form 0.5 * sum(mu^2 + sigma^2 - 1 -
    log sigma^2).
    """
    batch = np.asarray(batch, dtype=float)
    noise = np.asarray(noise, dtype=float)
    if noise.shape != (batch.shape[0], model.latent_dim):
        raise SchemaError(f"noise shape {noise.shape} != (batch, latent_dim)")
    *_, recon, kl = _elbo_parts(model, batch, noise)
    return recon + model.beta * kl, recon, kl


def elbo_gradients(model: VaeModel, batch, noise):
    """Analytic gradients of the batch objective for every parameter.

    Returns (encoder grads, decoder grads, loss, recon, kl); gradient lists
    are flattened [W, b, W, b, ...] like nn.get_params.
    """
    batch = np.asarray(batch, dtype=float)
    noise = np.asarray(noise, dtype=float)
    enc_trace, dec_trace, mu, logvar, sigma, diff, recon, kl = _elbo_parts(model, batch, noise)
    b_rows = batch.shape[0]
    d_xhat = 2.0 * diff / diff.size
    dec_grads = nn.backward(model.decoder, dec_trace, d_xhat)
    d_z = nn.input_gradient(model.decoder, dec_trace, d_xhat)
    d_mu = d_z + model.beta * mu / b_rows
    d_logvar = d_z * noise * 0.5 * sigma + model.beta * 0.5 * (sigma * sigma - 1.0) / b_rows
    d_h = np.concatenate([d_mu, d_logvar], axis=1)
    enc_grads = nn.backward(model.encoder, enc_trace, d_h)
    return (nn.flatten_grads(enc_grads), nn.flatten_grads(dec_grads),
            recon + model.beta * kl, recon, kl)


def elbo_grad_check(model: VaeModel, batch, noise, n_samples: int = 150,
                    step: float = 1e-5, seed: int = 0) -> float:
    """Finite-difference check of the full objective over both networks."""
    batch = np.asarray(batch, dtype=float)
    noise = np.asarray(noise, dtype=float)
    enc_g, dec_g, *_ = elbo_gradients(model, batch, noise)
    params = nn.get_params(model.encoder) + nn.get_params(model.decoder)
    n_enc = len(nn.get_params(model.encoder))

    def value(ps):
        enc = nn.set_params(model.encoder, ps[:n_enc])
        dec = nn.set_params(model.decoder, ps[n_enc:])
        m = VaeModel(encoder=enc, decoder=dec, latent_dim=model.latent_dim,
                     beta=model.beta, feature_norms=model.feature_norms,
                     binary_columns=model.binary_columns,
                     col_min=model.col_min, col_max=model.col_max, seed=model.seed)
        return elbo_loss(m, batch, noise)[0]

    return nn.finite_difference_check(value, params, enc_g + dec_g,
                                      n_samples=n_samples, step=step, seed=seed)


def modeled_columns(table: PanelTable) -> list[str]:
    return [c for c, r in table.roles.items() if r in MODELED_ROLES]


def _build_model(columns, norms, binary, col_min, col_max, config: VaeConfig) -> VaeModel:
    width = len(columns)
    enc = nn.init_mlp([width, *config.hidden, 2 * config.latent_dim],
                      seed=np.random.SeedSequence((config.seed, 10)).generate_state(1)[0])
    dec = nn.init_mlp([config.latent_dim, *config.hidden, width],
                      seed=np.random.SeedSequence((config.seed, 11)).generate_state(1)[0])
    return VaeModel(encoder=enc, decoder=dec, latent_dim=config.latent_dim,
                    beta=config.beta, feature_norms=norms, binary_columns=binary,
                    col_min=col_min, col_max=col_max, seed=config.seed)


def train(table: PanelTable, config: VaeConfig) -> tuple[VaeModel, list[dict]]:
    """Fit the VAE on the panel's modeled columns; returns per-epoch losses.

    Columns are standardized with the training means/SDs before the network
    sees them; the run is deterministic given config.seed.
    """
    cols = modeled_columns(table)
    if not cols:
        raise SchemaError("panel declares no outcome/treatment/control columns")
    if len(table) < 2:
        raise DomainError("need at least 2 rows to train")
    raw = table.data[cols].to_numpy(dtype=float)
    means = raw.mean(axis=0)
    sds = raw.std(axis=0)
    sds = np.where(sds > 0, sds, 1.0)
    norms = FeatureNorms(columns=tuple(cols), means=means, sds=sds)
    binary = tuple(c for i, c in enumerate(cols)
                   if np.isin(np.unique(raw[:, i]), (0.0, 1.0)).all())
    model = _build_model(cols, norms, binary, raw.min(axis=0), raw.max(axis=0), config)

    data = norms.standardize(table.data)
    n = data.shape[0]
    params = nn.get_params(model.encoder) + nn.get_params(model.decoder)
    n_enc = len(nn.get_params(model.encoder))
    state = nn.init_optimizer(params, learning_rate=config.learning_rate)
    rng = np.random.default_rng((config.seed, 12))
    trace: list[dict] = []
    for epoch in range(config.epochs):
        perm = rng.permutation(n)
        tot = np.zeros(3)
        n_batches = 0
        for start in range(0, n, config.batch_size):
            rows = perm[start:start + config.batch_size]
            batch = data[rows]
            noise = rng.standard_normal((len(rows), config.latent_dim))
            try:
                enc_g, dec_g, loss, recon, kl = elbo_gradients(model, batch, noise)
            except NumericError as exc:
                raise ConvergenceError(f"training diverged at epoch {epoch}: {exc}") from exc
            params, state = nn.adam_step(params, enc_g + dec_g, state)
            model.encoder = nn.set_params(model.encoder, params[:n_enc])
            model.decoder = nn.set_params(model.decoder, params[n_enc:])
            tot += (loss, recon, kl)
            n_batches += 1
        trace.append({"epoch": epoch, "loss": tot[0] / n_batches,
                      "reconstruction": tot[1] / n_batches, "kl": tot[2] / n_batches})
    return model, trace


def generate(model: VaeModel, n: int | None = None, mode: str = "encode_resample",
             source: PanelTable | None = None, seed: int = 0,
             noise_scale: float = 1.0) -> pd.DataFrame:
    """Produce generated rows in original units.

    encode_resample re-encodes each source row and draws its latent code
    from the posterior, one generated row per source row; prior_sampling
    decodes standard-normal codes (diagnostics). Binary columns are
    thresholded at 0.5 and the rest clipped to the observed range. Columns
    not modeled by the network (identifiers, labels) are copied from the
    source rows in encode_resample mode.
    """
    cols = list(model.feature_norms.columns)
    rng = np.random.default_rng((seed, 13))
    if mode == "prior_sampling":
        if n is None:
            raise DomainError("prior_sampling requires an explicit row count")
        z = rng.standard_normal((n, model.latent_dim))
        copied = None
    elif mode == "encode_resample":
        if source is None or len(source) < 1:
            raise DomainError("encode_resample requires a nonempty source panel")
        if n is None:
            n = len(source)
        if n > len(source):
            raise DomainError(f"cannot draw {n} rows from a {len(source)}-row source")
        frame = source.data.iloc[:n]
        mu, logvar = model.encode(model.feature_norms.standardize(frame))
        z = mu + noise_scale * np.exp(0.5 * logvar) * rng.standard_normal(mu.shape)
        copied = frame.drop(columns=[c for c in cols if c in frame.columns])
    else:
        raise DomainError(f"unknown generation mode {mode!r}")
    decoded = nn.forward(model.decoder, z).output
    values = model.feature_norms.destandardize(decoded)
    out = pd.DataFrame(values, columns=cols)
    for i, c in enumerate(cols):
        if c in model.binary_columns:
            out[c] = (out[c] >= 0.5).astype(float)
        else:
            out[c] = np.clip(out[c], model.col_min[i], model.col_max[i])
    if copied is not None:
        for c in copied.columns:
            out[c] = copied[c].to_numpy()
    return out


def _nearest_rank_pair(a: np.ndarray, b: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Sort both samples and pair equal ranks, thinning the larger side."""
    a, b = np.sort(a), np.sort(b)
    if len(a) == len(b):
        return a, b
    small, big = (a, b) if len(a) < len(b) else (b, a)
    m, big_n = len(small), len(big)
    if m == 1:
        picked = big[[0]]
    else:
        picked = big[np.round(np.arange(m) * (big_n - 1) / (m - 1)).astype(int)]
    return (small, picked) if len(a) < len(b) else (picked, small)


def validate(real: PanelTable, generated: pd.DataFrame, gates: Gates = Gates(),
             columns: list[str] | None = None) -> QualityReport:
    """Distribution-match report between real and generated samples.

    SMD uses the pooled-variance denominator; MAE/MSE pair sorted values at
    equal ranks (nearest-rank thinning when sizes differ) on columns scaled
    by the real sample's SD.
    """
    if columns is None:
        columns = modeled_columns(real)
    missing = [c for c in columns if c not in generated.columns]
    if missing:
        raise SchemaError(f"generated sample is missing column(s) {missing}")
    smd: dict[str, float] = {}
    mae: dict[str, float] = {}
    mse: dict[str, float] = {}
    for c in columns:
        xr = real.data[c].to_numpy(dtype=float)
        xg = generated[c].to_numpy(dtype=float)
        vr, vg = xr.var(ddof=1) if len(xr) > 1 else 0.0, xg.var(ddof=1) if len(xg) > 1 else 0.0
        gap = xr.mean() - xg.mean()
        if vr == 0.0 and vg == 0.0:
            smd[c] = 0.0 if gap == 0.0 else float("inf")
        else:
            smd[c] = float(gap / np.sqrt(0.5 * (vr + vg)))
        scale = np.sqrt(vr) if vr > 0 else 1.0
        pr, pg = _nearest_rank_pair(xr / scale, xg / scale)
        diff = pr - pg
        mae[c] = float(np.mean(np.abs(diff)))
        mse[c] = float(np.mean(diff * diff))
    passed = (all(abs(v) <= gates.smd for v in smd.values())
              and all(v <= gates.mae for v in mae.values())
              and all(v <= gates.mse for v in mse.values()))
    return QualityReport(smd=smd, mae=mae, mse=mse, gates=gates, passed=passed)


VAE_CHECKPOINT_VERSION = 1


def save_model(model: VaeModel, path) -> None:
    """One-file JSON checkpoint; floats round-trip bit-exactly via repr."""
    payload = {
        "format_version": VAE_CHECKPOINT_VERSION,
        "latent_dim": model.latent_dim,
        "beta": model.beta,
        "seed": model.seed,
        "encoder": nn.mlp_to_dict(model.encoder),
        "decoder": nn.mlp_to_dict(model.decoder),
        "columns": list(model.feature_norms.columns),
        "means": model.feature_norms.means.tolist(),
        "sds": model.feature_norms.sds.tolist(),
        "binary_columns": list(model.binary_columns),
        "col_min": model.col_min.tolist(),
        "col_max": model.col_max.tolist(),
    }
    with open(path, "w") as fh:
        json.dump(payload, fh)


def load_model(path) -> VaeModel:
    with open(path) as fh:
        payload = json.load(fh)
    if payload.get("format_version") != VAE_CHECKPOINT_VERSION:
        raise SchemaError(f"unsupported model version {payload.get('format_version')!r}")
    norms = FeatureNorms(columns=tuple(payload["columns"]),
                         means=np.array(payload["means"], dtype=float),
                         sds=np.array(payload["sds"], dtype=float))
    return VaeModel(encoder=nn.mlp_from_dict(payload["encoder"]),
                    decoder=nn.mlp_from_dict(payload["decoder"]),
                    latent_dim=payload["latent_dim"], beta=payload["beta"],
                    feature_norms=norms,
                    binary_columns=tuple(payload["binary_columns"]),
                    col_min=np.array(payload["col_min"], dtype=float),
                    col_max=np.array(payload["col_max"], dtype=float),
                    seed=payload["seed"])


def merge(real: PanelTable, generated: pd.DataFrame, quality: QualityReport | None = None,
          override: bool = False) -> PanelTable:
    """Stack real and generated rows with a provenance column.

    Generated rows get synthetic firm identifiers derived from their source
    firm and keep the source row's year, so each real firm gains a twin
    with the same year sequence.
    """
    if quality is None and not override:
        raise DomainError("merge requires a QualityReport unless override=True")
    if quality is not None and not quality.passed and not override:
        raise DomainError("quality gates failed; pass override=True to merge anyway")
    value_cols = [c for c in real.data.columns if c != real.firm_col]
    missing = [c for c in value_cols if c not in generated.columns]
    if missing:
        raise SchemaError(f"generated sample is missing column(s) {missing}")
    real_part = real.data.copy()
    real_part["provenance"] = "real"
    gen_part = generated.copy()
    if real.firm_col in gen_part.columns:
        gen_part[real.firm_col] = GENERATED_FIRM_PREFIX + gen_part[real.firm_col].astype(str)
    else:
        gen_part[real.firm_col] = [f"{GENERATED_FIRM_PREFIX}{i}" for i in range(len(gen_part))]
    gen_part["provenance"] = "generated"
    merged = pd.concat([real_part, gen_part[list(real_part.columns)]], ignore_index=True)
    roles = dict(real.roles)
    roles["provenance"] = "auxiliary"
    return PanelTable(data=merged, roles=roles, firm_col=real.firm_col, year_col=real.year_col)
