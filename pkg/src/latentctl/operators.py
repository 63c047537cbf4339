"""Attribute energies over latent vectors and the latent prior.

Each attribute gets a small MLP classifier on z. The energy of class a
under classifier f is the normalized negative logit,
``E(a|z) = -f(z)[a] + log sum_a' exp(f(z)[a'])``, i.e. exactly
``-log softmax(f(z))[a]``, so ``sum_a exp(-E(a|z)) = 1`` by construction.
A composed energy is the weight-scaled sum of per-attribute energies and
is the object samplers differentiate.

The prior over z is either a standard normal or a small trained
generator; both expose the same seeded ``sample``.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.exceptions import NotFittedError
from sklearn.utils.validation import check_array, check_X_y

from . import autodiff as ad
from .nn import MLP, Adam, Linear, Module

__all__ = [
    "LatentClassifier",
    "AttributeSpec",
    "ComposedEnergy",
    "LatentPrior",
    "GanPrior",
    "train_classifier",
    "train_gan_prior",
    "sample_prior",
    "EnergyError",
]

CLASSIFIER_HIDDEN = (43, 22, 2)


class EnergyError(ArithmeticError):
    """Non-finite energy or gradient; message names the attribute."""


class LatentClassifier(BaseEstimator):
    """MLP attribute classifier over latent vectors.

    Architecture is fixed-width (hidden 43, 22, 2 with LeakyReLU 0.01),
    trained full-batch with Adam on cross-entropy.
    """

    def __init__(self, attribute: str = "attr", num_classes: int = 2, lr: float = 1e-3,
                 epochs: int = 200, seed: int = 0, slope: float = 0.01):
        self.attribute = attribute
        self.num_classes = num_classes
        self.lr = lr
        self.epochs = epochs
        self.seed = seed
        self.slope = slope

    def _build(self, d: int) -> MLP:
        rng = np.random.default_rng(np.random.SeedSequence(entropy=self.seed, spawn_key=(1,)))
        return MLP([d, *CLASSIFIER_HIDDEN, self.num_classes], rng, slope=self.slope)

    def fit(self, X, y):
        X, y = check_X_y(X, y, dtype=np.float64)
        classes = np.unique(y)
        if classes.size < 2:
            raise ValueError(
                f"classifier for {self.attribute!r} needs >= 2 classes in y, got {classes.size}"
            )
        if classes.size > self.num_classes or y.max() >= self.num_classes or y.min() < 0:
            raise ValueError(
                f"labels out of range for num_classes={self.num_classes}: classes {classes}"
            )
        self.n_features_in_ = X.shape[1]
        self.classes_ = np.arange(self.num_classes)
        self.model_ = self._build(X.shape[1])
        opt = Adam(self.model_.parameters(), lr=self.lr)
        yi = y.astype(np.int64)
        self.loss_curve_ = []
        for _ in range(self.epochs):
            with ad.tape():
                logits = self.model_(ad.constant(X))
                picked = ad.gather_last(logits, yi)
                loss = ad.reduce_mean(ad.log_sum_exp(logits) - picked)
                opt.zero_grad()
                ad.backward(loss)
            opt.step()
            self.loss_curve_.append(loss.item())
        return self

    def _check_fitted(self):
        if not hasattr(self, "model_"):
            raise NotFittedError(
                f"This LatentClassifier instance for {self.attribute!r} is not fitted yet."
            )

    def logits(self, Z: np.ndarray) -> np.ndarray:
        self._check_fitted()
        Z = check_array(np.atleast_2d(Z), dtype=np.float64)
        return self.model_(ad.constant(Z)).data

    def predict_proba(self, Z: np.ndarray) -> np.ndarray:
        f = self.logits(Z)
        e = np.exp(f - f.max(axis=-1, keepdims=True))
        return e / e.sum(axis=-1, keepdims=True)

    def predict(self, Z: np.ndarray) -> np.ndarray:
        return self.logits(Z).argmax(axis=-1)

    def score(self, Z: np.ndarray, y: np.ndarray) -> float:
        return float(np.mean(self.predict(Z) == np.asarray(y)))

    def num_params(self) -> int:
        self._check_fitted()
        return self.model_.num_params()

    def state(self) -> dict[str, np.ndarray]:
        self._check_fitted()
        return self.model_.state()

    @classmethod
    def from_state(cls, attribute: str, state: dict[str, np.ndarray], **kwargs) -> "LatentClassifier":
        first = state["layers.0.weight"]
        last_bias = state[f"layers.{len(CLASSIFIER_HIDDEN)}.bias"]
        clf = cls(attribute=attribute, num_classes=last_bias.shape[0], **kwargs)
        clf.n_features_in_ = first.shape[0]
        clf.classes_ = np.arange(clf.num_classes)
        clf.model_ = clf._build(first.shape[0])
        clf.model_.load_state(state)
        return clf


@dataclass(frozen=True)
class AttributeSpec:
    """One controlled attribute: which classifier, which class, how hard."""

    classifier: LatentClassifier
    target_class: int
    weight: float = 1.0

    def __post_init__(self):
        if not 0 <= self.target_class < self.classifier.num_classes:
            raise ValueError(
                f"target_class {self.target_class} out of range for attribute "
                f"{self.classifier.attribute!r} with {self.classifier.num_classes} classes"
            )
        if self.weight <= 0:
            raise ValueError(f"weight must be positive, got {self.weight}")

    @property
    def name(self) -> str:
        return self.classifier.attribute


def attribute_energy(spec: AttributeSpec, z: np.ndarray) -> np.ndarray:
    """Per-row normalized negative logit of the target class (>= 0)."""
    try:
        f = spec.classifier.logits(z)
    except ad.NumericError as e:
        raise EnergyError(f"non-finite energy for attribute {spec.name!r}") from e
    m = f.max(axis=-1, keepdims=True)
    lse = (m + np.log(np.exp(f - m).sum(axis=-1, keepdims=True)))[..., 0]
    e = lse - f[..., spec.target_class]
    if not np.all(np.isfinite(e)):
        raise EnergyError(f"non-finite energy for attribute {spec.name!r}")
    return e


class ComposedEnergy:
    """Weighted sum of per-attribute energies; the samplers' drift source."""

    def __init__(self, specs: list[AttributeSpec] | tuple[AttributeSpec, ...] = ()):
        self.specs = tuple(specs)

    def __len__(self) -> int:
        return len(self.specs)

    def value(self, z: np.ndarray) -> np.ndarray:
        """Per-row total energy; zeros for the empty composition."""
        z2 = np.atleast_2d(np.asarray(z, dtype=np.float64))
        total = np.zeros(z2.shape[0])
        for spec in self.specs:
            total = total + spec.weight * attribute_energy(spec, z2)
        return total if np.asarray(z).ndim > 1 else total[0] * np.ones(())

    def _term_gradient(self, spec: AttributeSpec, z2: np.ndarray) -> np.ndarray:
        try:
            with ad.tape():
                zt = ad.parameter(z2)
                logits = spec.classifier.model_(zt)
                idx = np.full(z2.shape[0], spec.target_class, dtype=np.int64)
                energy = ad.log_sum_exp(logits) - ad.gather_last(logits, idx)
                ad.backward(ad.reduce_sum(energy))
        except ad.NumericError as e:
            raise EnergyError(f"non-finite gradient for attribute {spec.name!r}") from e
        return zt.grad

    def gradient_terms(self, z: np.ndarray):
        """(name, weight, dE/dz) per attribute, shaped like z."""
        z_arr = np.asarray(z, dtype=np.float64)
        z2 = np.atleast_2d(z_arr)
        out = []
        for spec in self.specs:
            spec.classifier._check_fitted()
            g = self._term_gradient(spec, z2)
            out.append((spec.name, spec.weight, g if z_arr.ndim > 1 else g[0]))
        return out

    def value_and_grad(self, z: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Total energy and its gradient in one call."""
        z_arr = np.asarray(z, dtype=np.float64)
        grad = np.zeros_like(z_arr)
        for _, lam, g in self.gradient_terms(z_arr):
            grad = grad + lam * g
        return self.value(z_arr), grad


def train_classifier(
    attribute: str,
    latents: np.ndarray,
    labels: np.ndarray,
    num_classes: int = 2,
    lr: float = 1e-3,
    epochs: int = 200,
    seed: int = 0,
    dev_fraction: float = 0.2,
) -> tuple[LatentClassifier, float]:
    """Fit a classifier on a deterministic train/dev split of the labeled
    latents and report held-out accuracy."""
    latents = np.asarray(latents, dtype=np.float64)
    labels = np.asarray(labels)
    rng = np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(2,)))
    order = rng.permutation(len(latents))
    n_dev = max(1, int(len(latents) * dev_fraction))
    dev_idx, train_idx = order[:n_dev], order[n_dev:]
    clf = LatentClassifier(attribute=attribute, num_classes=num_classes, lr=lr,
                           epochs=epochs, seed=seed)
    clf.fit(latents[train_idx], labels[train_idx])
    dev_acc = clf.score(latents[dev_idx], labels[dev_idx])
    return clf, dev_acc


# ---------------------------------------------------------------------------
# latent prior


class _Generator(Module):
    def __init__(self, noise_dim: int, hidden: int, d: int, rng: np.random.Generator):
        self.l1 = Linear(noise_dim, hidden, rng)
        self.l2 = Linear(hidden, d, rng)

    def __call__(self, eps):
        return self.l2(ad.leaky_relu(self.l1(eps), 0.01))


class _Discriminator(Module):
    def __init__(self, d: int, hidden: int, rng: np.random.Generator):
        self.l1 = Linear(d, hidden, rng)
        self.l2 = Linear(hidden, 1, rng)

    def __call__(self, z):
        return self.l2(ad.leaky_relu(self.l1(z), 0.01))


class LatentPrior:
    """Seeded sampling front-end for either prior kind."""

    def __init__(self, d: int, kind: str = "standard_gaussian",
                 generator: _Generator | None = None, noise_dim: int = 32):
        if kind not in ("standard_gaussian", "gan"):
            raise ValueError(f"unknown prior kind {kind!r}")
        if kind == "gan" and generator is None:
            raise ValueError("gan prior requires a trained generator")
        self.d = d
        self.kind = kind
        self.generator = generator
        self.noise_dim = noise_dim

    def sample(self, n: int, seed: int) -> np.ndarray:
        rng = np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(3,)))
        if self.kind == "standard_gaussian":
            return rng.standard_normal((n, self.d))
        eps = rng.standard_normal((n, self.noise_dim))
        out = self.generator(ad.constant(eps)).data
        if not np.all(np.isfinite(out)):
            raise EnergyError("prior generator produced non-finite latents")
        return out


def sample_prior(prior: LatentPrior, n: int, seed: int) -> np.ndarray:
    return prior.sample(n, seed)


class GanPrior(BaseEstimator):
    """Small adversarially-trained latent prior.

    Single-hidden-layer generator (noise_dim -> hidden -> d) and
    discriminator (d -> hidden -> 1), non-saturating generator loss,
    minibatch Adam for both players.
    """

    def __init__(self, noise_dim: int = 32, hidden: int = 64, lr: float = 1e-3,
                 epochs: int = 20, batch_size: int = 256, seed: int = 0):
        self.noise_dim = noise_dim
        self.hidden = hidden
        self.lr = lr
        self.epochs = epochs
        self.batch_size = batch_size
        self.seed = seed

    def fit(self, X, y=None):
        X = check_array(X, dtype=np.float64)
        if len(X) < 1000:
            raise ValueError(f"GAN prior training needs >= 1000 latents, got {len(X)}")
        d = X.shape[1]
        ss = np.random.SeedSequence(entropy=self.seed, spawn_key=(4,))
        init_rng, batch_rng = (np.random.default_rng(s) for s in ss.spawn(2))
        gen = _Generator(self.noise_dim, self.hidden, d, init_rng)
        disc = _Discriminator(d, self.hidden, init_rng)
        g_opt = Adam(gen.parameters(), lr=self.lr)
        d_opt = Adam(disc.parameters(), lr=self.lr)
        self.log_ = []
        n = len(X)
        for epoch in range(self.epochs):
            order = batch_rng.permutation(n)
            d_correct = 0
            d_total = 0
            g_loss_sum = 0.0
            d_loss_sum = 0.0
            n_batches = 0
            for start in range(0, n - self.batch_size + 1, self.batch_size):
                real = X[order[start : start + self.batch_size]]
                eps = batch_rng.standard_normal((len(real), self.noise_dim))

                # discriminator step: maximize log D(real) + log(1 - D(fake));
                # fake batch computed off-tape so G gets no gradient here
                fake = gen(ad.constant(eps)).data
                with ad.tape():
                    scores_real = disc(ad.constant(real))
                    scores_fake = disc(ad.constant(fake))
                    d_loss = ad.reduce_mean(
                        ad.concat_last([_softplus(ad.neg(scores_real)), _softplus(scores_fake)])
                    )
                    d_opt.zero_grad()
                    ad.backward(d_loss)
                d_opt.step()

                # generator step: non-saturating, maximize log D(fake); the
                # optimizer only holds G parameters, D grads are discarded
                with ad.tape():
                    g_scores = disc(gen(ad.constant(eps)))
                    g_loss = ad.reduce_mean(_softplus(ad.neg(g_scores)))
                    g_opt.zero_grad()
                    ad.backward(g_loss)
                g_opt.step()
                disc.zero_grad()

                d_correct += int((scores_real.data > 0).sum() + (scores_fake.data <= 0).sum())
                d_total += 2 * len(real)
                g_loss_sum += g_loss.item()
                d_loss_sum += d_loss.item()
                n_batches += 1

            eps = batch_rng.standard_normal((1024, self.noise_dim))
            sample_var = gen(ad.constant(eps)).data.var(axis=0)
            collapsed = bool(sample_var.min() < 1e-4)
            if collapsed:
                warnings.warn(
                    f"GAN prior mode collapse suspected at epoch {epoch}: "
                    f"min per-dim variance {sample_var.min():.2e}",
                    RuntimeWarning,
                )
            self.log_.append(
                {
                    "epoch": epoch,
                    "d_accuracy": d_correct / max(1, d_total),
                    "d_loss": d_loss_sum / max(1, n_batches),
                    "g_loss": g_loss_sum / max(1, n_batches),
                    "min_fake_var": float(sample_var.min()),
                    "mode_collapse": collapsed,
                }
            )
        self.n_features_in_ = d
        self.generator_ = gen
        self.discriminator_ = disc
        return self

    def prior(self) -> LatentPrior:
        if not hasattr(self, "generator_"):
            raise NotFittedError("This GanPrior instance is not fitted yet.")
        return LatentPrior(self.n_features_in_, kind="gan",
                           generator=self.generator_, noise_dim=self.noise_dim)

    def state(self) -> dict[str, np.ndarray]:
        if not hasattr(self, "generator_"):
            raise NotFittedError("This GanPrior instance is not fitted yet.")
        out = {f"generator.{k}": v for k, v in self.generator_.state().items()}
        out.update({f"discriminator.{k}": v for k, v in self.discriminator_.state().items()})
        return out

    @classmethod
    def from_state(cls, state: dict[str, np.ndarray], **kwargs) -> "GanPrior":
        gp = cls(**kwargs)
        d = state["generator.l2.bias"].shape[0]
        gp.noise_dim = state["generator.l1.weight"].shape[0]
        gp.hidden = state["generator.l1.bias"].shape[0]
        rng = np.random.default_rng(0)
        gp.generator_ = _Generator(gp.noise_dim, gp.hidden, d, rng)
        gp.discriminator_ = _Discriminator(d, gp.hidden, rng)
        gp.generator_.load_state(
            {k.removeprefix("generator."): v for k, v in state.items() if k.startswith("generator.")}
        )
        gp.discriminator_.load_state(
            {k.removeprefix("discriminator."): v for k, v in state.items() if k.startswith("discriminator.")}
        )
        gp.n_features_in_ = d
        return gp


def _softplus(x):
    """log(1 + exp(x)) via the stable identity max(x,0) + log1p(exp(-|x|))."""
    relu = ad.clamp_min(x, 0.0)
    # |x| = x * sign(x) with sign held constant; exact a.e.
    absx = ad.mul(x, ad.constant(np.sign(x.data)))
    one = ad.constant(np.ones(x.data.shape))
    return ad.add(relu, ad.log(ad.add(ad.exp(ad.neg(absx)), one)))


def train_gan_prior(latents: np.ndarray, seed: int = 0, **kwargs) -> tuple[LatentPrior, list[dict]]:
    gp = GanPrior(seed=seed, **kwargs).fit(latents)
    return gp.prior(), gp.log_
