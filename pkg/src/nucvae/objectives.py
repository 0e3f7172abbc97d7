"""Auxiliary disentanglement objectives on top of the base VAE loss.

Three families, individually switchable and combined by nonnegative
weights:

  * latent supervision: per-factor affine+sigmoid probes on the 1-d
    negation/uncertainty latents, trained with BCE whose error also
    reaches the encoder and latent heads;
  * adversarial: one affine+sigmoid classifier per (latent space,
    non-target factor) pair. Its BCE trains only the classifier (latents
    detached); a separate entropy term (classifier weights frozen) pushes
    the encoder to make those predictions uninformative;
  * mutual-information minimization: a contrastive upper bound on the MI
    of each latent-space pair, using a small learned Gaussian conditional
    per pair. The conditional nets train on their own likelihood loss
    only; the bound's gradient reaches only the encoder side.

The gradient routing between these parameter groups is a contract,
enforced by parameter-delta tests.
"""

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

ADVERSARY_PAIRS = (("n", "u"), ("u", "n"), ("c", "n"), ("c", "u"))
CLUB_PAIRS = (("n", "u"), ("n", "c"), ("u", "c"))  # net for (i, j) models q(z_i | z_j)


@dataclass
class ObjectiveWeights:
    lambda_inf: float = 1.0
    lambda_adv: float = 1.0
    lambda_min: float = 0.01
    beta_n: float = 0.005
    beta_u: float = 0.005
    beta_c: float = 0.01

    def __post_init__(self):
        for name, v in self.__dict__.items():
            if v < 0:
                raise ValueError(f"{name} must be nonnegative")

    @property
    def betas(self):
        return {"n": self.beta_n, "u": self.beta_u, "c": self.beta_c}


def bce_with_logits(logits, labels):
    """Binary cross-entropy, batch mean, computed stably from logits."""
    y = Tensor(np.asarray(labels, dtype=np.float64))
    return ad.tmean(ad.sub(ad.softplus(logits), ad.mul(y, logits)))


def binary_entropy_from_logits(logits):
    """Mean entropy of Bernoulli(sigmoid(logits)), stable at saturation."""
    p = ad.sigmoid(logits)
    ent = ad.add(
        ad.mul(p, ad.softplus(ad.neg(logits))),
        ad.mul(ad.sub(1.0, p), ad.softplus(logits)),
    )
    return ad.tmean(ent)


def adv_entropy(predictions):
    """Mean binary entropy of predicted probabilities (must lie in (0,1))."""
    p = predictions if isinstance(predictions, Tensor) else Tensor(predictions)
    if np.any(p.data <= 0) or np.any(p.data >= 1):
        raise ValueError("predicted probabilities must lie strictly in (0, 1)")
    ent = ad.neg(
        ad.add(
            ad.mul(p, ad.log(p)),
            ad.mul(ad.sub(1.0, p), ad.log(ad.sub(1.0, p))),
        )
    )
    return ad.tmean(ent)


class _AffineClassifier:
    def __init__(self, in_dim, rng):
        k = 1.0 / np.sqrt(in_dim)
        self.w = Tensor(rng.uniform(-k, k, size=(in_dim, 1)), requires_grad=True)
        self.b = Tensor(rng.uniform(-k, k, size=(1,)), requires_grad=True)

    def logits(self, z, frozen=False):
        w = Tensor(self.w.data) if frozen else self.w
        b = Tensor(self.b.data) if frozen else self.b
        out = ad.affine(z, w, b)
        return ad.reshape(out, (z.data.shape[0],))


class LatentProbe(_AffineClassifier):
    """Affine + sigmoid supervision head for one target factor."""

    def predict_proba(self, z_values):
        with ad.no_grad():
            logits = z_values @ self.w.data + self.b.data
        return 1.0 / (1.0 + np.exp(-logits[:, 0]))


class ProbeSet:
    def __init__(self, latent_dims, rng):
        self.probes = {k: LatentProbe(latent_dims[k], rng) for k in ("n", "u")}

    def params(self):
        return {
            f"{k}.{name}": t
            for k, p in self.probes.items()
            for name, t in (("w", p.w), ("b", p.b))
        }


def inf_loss(probe, z, labels):
    """Supervision BCE; gradients flow to the probe and into z."""
    return bce_with_logits(probe.logits(z), labels)


def inf_total(probes, latents, labels):
    total = None
    for k in ("n", "u"):
        term = inf_loss(probes.probes[k], latents[k], labels[k])
        total = term if total is None else ad.add(total, term)
    return total


class AdversaryBank:
    """One affine+sigmoid classifier per (latent space, non-target factor)."""

    def __init__(self, latent_dims, rng):
        self.classifiers = {
            (space, factor): _AffineClassifier(latent_dims[space], rng)
            for space, factor in ADVERSARY_PAIRS
        }

    def params(self):
        out = {}
        for (space, factor), clf in self.classifiers.items():
            out[f"{space}->{factor}.w"] = clf.w
            out[f"{space}->{factor}.b"] = clf.b
        return out


def adv_classifier_loss(classifier, z, labels):
    """BCE training the adversary only: z enters detached."""
    return bce_with_logits(classifier.logits(z.detach()), labels)


def adv_total(bank, latents, labels):
    """(classifier-update loss, encoder-update loss) over all four pairs.

    The first half is the sum of adversary BCEs on detached latents; the
    second is the negated sum of prediction entropies with the adversary
    weights frozen, so minimizing it maximizes entropy through the
    encoder alone.
    """
    cls_total = None
    ent_total = None
    for (space, factor), clf in bank.classifiers.items():
        cls_term = adv_classifier_loss(clf, latents[space], labels[factor])
        ent_term = binary_entropy_from_logits(clf.logits(latents[space], frozen=True))
        cls_total = cls_term if cls_total is None else ad.add(cls_total, cls_term)
        ent_total = ent_term if ent_total is None else ad.add(ent_total, ent_term)
    return cls_total, ad.neg(ent_total)


class ClubNet:
    """Gaussian conditional q(z_i | z_j): one tanh hidden layer, two heads."""

    def __init__(self, cond_dim, target_dim, rng, hidden=64):
        k1 = 1.0 / np.sqrt(cond_dim)
        k2 = 1.0 / np.sqrt(hidden)
        self.w1 = Tensor(rng.uniform(-k1, k1, size=(cond_dim, hidden)), requires_grad=True)
        self.b1 = Tensor(rng.uniform(-k1, k1, size=(hidden,)), requires_grad=True)
        self.mu_w = Tensor(rng.uniform(-k2, k2, size=(hidden, target_dim)), requires_grad=True)
        self.mu_b = Tensor(rng.uniform(-k2, k2, size=(target_dim,)), requires_grad=True)
        self.lv_w = Tensor(rng.uniform(-k2, k2, size=(hidden, target_dim)), requires_grad=True)
        self.lv_b = Tensor(rng.uniform(-k2, k2, size=(target_dim,)), requires_grad=True)

    def params(self):
        return {
            "w1": self.w1, "b1": self.b1,
            "mu_w": self.mu_w, "mu_b": self.mu_b,
            "lv_w": self.lv_w, "lv_b": self.lv_b,
        }

    def forward(self, cond, frozen=False):
        ps = {name: (Tensor(t.data) if frozen else t) for name, t in self.params().items()}
        h = ad.tanh(ad.affine(cond, ps["w1"], ps["b1"]))
        mu = ad.affine(h, ps["mu_w"], ps["mu_b"])
        logvar = ad.affine(h, ps["lv_w"], ps["lv_b"])
        return mu, logvar


class ClubBank:
    def __init__(self, latent_dims, rng, hidden=64):
        self.nets = {
            (i, j): ClubNet(latent_dims[j], latent_dims[i], rng, hidden)
            for i, j in CLUB_PAIRS
        }

    def params(self):
        return {
            f"{i}|{j}.{name}": t
            for (i, j), net in self.nets.items()
            for name, t in net.params().items()
        }


def club_upper_bound(net, z_target, z_cond):
    """Contrastive MI upper bound for one pair, gradients into z only.

    Mean conditional log-density of the paired samples minus the mean over
    all cross pairings (the product-of-marginals term, computed in closed
    form from the batch's first and second moments of z_target, which
    equals the full NxN cross-pair average). Log-density terms that do not
    involve z_target cancel between the two halves and are omitted.
    """
    if z_target.data.shape[0] < 2:
        raise ValueError("CLUB estimate needs a batch of at least 2")
    mu, logvar = net.forward(z_cond, frozen=True)
    inv_var = ad.exp(ad.neg(logvar))
    diff = ad.sub(z_target, mu)
    positive = ad.tmean(ad.tsum(ad.mul(-0.5, ad.mul(ad.square(diff), inv_var)), axis=1))
    m1 = ad.tmean(z_target, axis=0, keepdims=True)
    m2 = ad.tmean(ad.square(z_target), axis=0, keepdims=True)
    cross_sq = ad.add(ad.sub(m2, ad.mul(2.0, ad.mul(m1, mu))), ad.square(mu))
    negative = ad.tmean(ad.tsum(ad.mul(-0.5, ad.mul(cross_sq, inv_var)), axis=1))
    return ad.sub(positive, negative)


def club_net_loss(net, z_target, z_cond):
    """Negative mean Gaussian log-likelihood training only the net."""
    mu, logvar = net.forward(z_cond.detach() if isinstance(z_cond, Tensor) else Tensor(z_cond))
    x = z_target.detach() if isinstance(z_target, Tensor) else Tensor(z_target)
    diff = ad.sub(x, mu)
    nll = ad.mul(
        0.5,
        ad.add(
            ad.add(Tensor(np.log(2.0 * np.pi)), logvar),
            ad.mul(ad.square(diff), ad.exp(ad.neg(logvar))),
        ),
    )
    return ad.tmean(ad.tsum(nll, axis=1))


def club_bank_loss(bank, latents):
    total = None
    for (i, j), net in bank.nets.items():
        term = club_net_loss(net, latents[i], latents[j])
        total = term if total is None else ad.add(total, term)
    return total


def min_loss(bank, latents):
    """Sum of the pairwise MI upper bounds over the three space pairs."""
    total = None
    for (i, j), net in bank.nets.items():
        term = club_upper_bound(net, latents[i], latents[j])
        total = term if total is None else ad.add(total, term)
    return total


def total_loss(elbo, inf_term, adv_encoder_term, min_term, weights):
    """Full training objective from the individually computed pieces."""
    out = elbo
    if inf_term is not None:
        out = ad.add(out, ad.mul(inf_term, weights.lambda_inf))
    if adv_encoder_term is not None:
        out = ad.add(out, ad.mul(adv_encoder_term, weights.lambda_adv))
    if min_term is not None:
        out = ad.add(out, ad.mul(min_term, weights.lambda_min))
    return out
