"""Training orchestration: per-batch update phases, epochs, checkpoints.

Each batch runs up to three phases in a fixed order, every phase owning
its own Adam optimizer and parameter group: (1) the conditional-density
nets of the MI bound fit the current latent samples, (2) the adversarial
classifiers fit detached latents, (3) the main step updates encoder,
heads, decoder, and supervision probes on the weighted full objective.

All randomness derives from the config seed: the stream for epoch e is
seeded by (seed, stream_tag, e), so resuming from a checkpoint at epoch k
replays exactly what an uninterrupted run would have done.
"""

import json
from dataclasses import asdict, dataclass
from hashlib import sha256
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import kernels, model, objectives
from .corpus import build_vocabulary, Vocabulary
from .metrics import LogisticProbe, macro_prf

CHECKPOINT_VERSION = 1
OBJECTIVE_NAMES = ("inf", "adv", "min")


class TrainingDiverged(RuntimeError):
    """A loss component became non-finite; message names the term."""


@dataclass
class TrainConfig:
    # model
    embedding_dim: int = 256
    hidden_dim: int = 256
    num_layers: int = 2
    latent_n: int = 1
    latent_u: int = 1
    latent_c: int = 62
    club_hidden: int = 64
    min_frequency: int = 1
    # optimization
    epochs: int = 20
    batch_size: int = 128
    lr_main: float = 3e-4
    lr_adversary: float = 3e-4
    lr_club: float = 5e-4
    teacher_forcing_p: float = 0.5
    word_dropout: float = 0.5
    dropout: float = 0.5
    beta_n: float = 0.005
    beta_u: float = 0.005
    beta_c: float = 0.01
    lambda_inf: float = 1.0
    lambda_adv: float = 1.0
    lambda_min: float = 0.01
    objectives: tuple = ()
    grad_clip: float = 0.0  # 0 disables clipping
    seed: int = 0
    probe_fit_cap: int = 4000

    def __post_init__(self):
        self.objectives = tuple(self.objectives)
        for name in self.objectives:
            if name not in OBJECTIVE_NAMES:
                raise ValueError(f"unknown objective {name!r}")
        for name in ("epochs", "batch_size", "lr_main", "lr_adversary", "lr_club"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        for name in ("lambda_inf", "lambda_adv", "lambda_min",
                     "beta_n", "beta_u", "beta_c", "grad_clip"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be nonnegative")

    def to_dict(self):
        d = asdict(self)
        d["objectives"] = list(self.objectives)
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["objectives"] = tuple(d.get("objectives", ()))
        return cls(**d)

    @classmethod
    def from_file(cls, path):
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))

    def save(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh, indent=2, sort_keys=True)
            fh.write("\n")

    def config_hash(self):
        blob = json.dumps(self.to_dict(), sort_keys=True).encode("utf-8")
        return sha256(blob).hexdigest()[:16]

    def weights(self):
        return objectives.ObjectiveWeights(
            lambda_inf=self.lambda_inf,
            lambda_adv=self.lambda_adv,
            lambda_min=self.lambda_min,
            beta_n=self.beta_n,
            beta_u=self.beta_u,
            beta_c=self.beta_c,
        )

    def model_spec(self, vocab_size):
        return model.ModelSpec(
            vocab_size=vocab_size,
            embedding_dim=self.embedding_dim,
            hidden_dim=self.hidden_dim,
            num_layers=self.num_layers,
            latent_dims={"n": self.latent_n, "u": self.latent_u, "c": self.latent_c},
            word_dropout=self.word_dropout,
            dropout=self.dropout,
        )


def derive_rng(seed, stream, index=0):
    """One seeded generator per (seed, stream, index); all randomness
    in training flows from these."""
    return np.random.default_rng([seed, stream, index])


class Adam:
    """Adam over a named parameter dict, fused update via kernels."""

    def __init__(self, params, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = params
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def step(self):
        self.t += 1
        bc1 = 1.0 - self.beta1**self.t
        bc2 = 1.0 - self.beta2**self.t
        for name, p in self.params.items():
            if p.grad is None:
                continue
            kernels.adam_step(
                p.data, p.grad, self.m[name], self.v[name],
                self.lr, self.beta1, self.beta2, self.eps, bc1, bc2,
            )

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None


def clip_global_norm(params, max_norm):
    total = 0.0
    for p in params.values():
        if p.grad is not None:
            total += float((p.grad**2).sum())
    norm = np.sqrt(total)
    if norm > max_norm > 0:
        scale = max_norm / norm
        for p in params.values():
            if p.grad is not None:
                p.grad *= scale
    return norm


class System:
    """Model plus the objective machinery the config actually enables."""

    def __init__(self, config, vocab, rng):
        self.config = config
        self.vocab = vocab
        spec = config.model_spec(len(vocab))
        self.spec = spec
        self.model = model.SeqVAE(spec, rng)
        self.probes = (
            objectives.ProbeSet(spec.latent_dims, rng)
            if "inf" in config.objectives else None
        )
        self.adversaries = (
            objectives.AdversaryBank(spec.latent_dims, rng)
            if "adv" in config.objectives else None
        )
        self.clubs = (
            objectives.ClubBank(spec.latent_dims, rng, hidden=config.club_hidden)
            if "min" in config.objectives else None
        )

    def main_params(self):
        out = dict(self.model.params())
        if self.probes is not None:
            for name, t in self.probes.params().items():
                out[f"probes.{name}"] = t
        return out

    def named_groups(self):
        groups = {"main": self.main_params()}
        if self.adversaries is not None:
            groups["adversary"] = self.adversaries.params()
        if self.clubs is not None:
            groups["club"] = self.clubs.params()
        return groups

    def all_params(self):
        out = {}
        for gname, group in self.named_groups().items():
            for name, t in group.items():
                out[f"{gname}/{name}"] = t
        return out


def make_optimizers(system):
    config = system.config
    opts = {"main": Adam(system.main_params(), config.lr_main)}
    if system.adversaries is not None:
        opts["adversary"] = Adam(system.adversaries.params(), config.lr_adversary)
    if system.clubs is not None:
        opts["club"] = Adam(system.clubs.params(), config.lr_club)
    return opts


def batch_labels(statements):
    return {
        "n": np.array([s.negation for s in statements], dtype=np.float64),
        "u": np.array([s.uncertainty for s in statements], dtype=np.float64),
    }


def _finite_or_raise(components):
    for name, value in components.items():
        if not np.isfinite(value):
            raise TrainingDiverged(f"loss term {name!r} is non-finite ({value})")


def train_step(system, tokens, lengths, labels, optimizers, noise):
    """One batch: conditional-net phase, adversary phase, then main update.

    Returns the scalar loss components of the main objective plus the
    auxiliary phase losses.
    """
    config = system.config
    weights = config.weights()
    params_by_space = system.model.posterior(tokens, lengths, noise)
    latents = system.model.sample_latents(params_by_space, noise.eps)
    components = {}

    if system.clubs is not None:
        club_nll = objectives.club_bank_loss(system.clubs, latents)
        optimizers["club"].zero_grad()
        ad.backward(club_nll)
        optimizers["club"].step()
        optimizers["club"].zero_grad()
        components["club_nll"] = club_nll.item()

    if system.adversaries is not None:
        cls_total, _ = objectives.adv_total(system.adversaries, latents, labels)
        optimizers["adversary"].zero_grad()
        ad.backward(cls_total)
        optimizers["adversary"].step()
        optimizers["adversary"].zero_grad()
        components["adv_cls"] = cls_total.item()

    targets = model.decoder_targets(tokens, lengths)
    logits = system.model.decoder.decode(latents_concat(latents), targets, noise)
    rec = model.reconstruction_loss(logits, targets)
    kls = {s: model.kl_standard_normal(p) for s, p in params_by_space.items()}
    elbo = model.elbo_loss(rec, kls, weights.betas)
    components["rec"] = rec.item()
    for s, kl in kls.items():
        components[f"kl_{s}"] = kl.item()
    components["elbo"] = elbo.item()

    inf_term = adv_term = min_term = None
    if system.probes is not None:
        inf_term = objectives.inf_total(system.probes, latents, labels)
        components["inf"] = inf_term.item()
    if system.adversaries is not None:
        _, adv_term = objectives.adv_total(system.adversaries, latents, labels)
        components["adv_ent"] = -adv_term.item()
    if system.clubs is not None:
        min_term = objectives.min_loss(system.clubs, latents)
        components["min"] = min_term.item()

    total = objectives.total_loss(elbo, inf_term, adv_term, min_term, weights)
    components["total"] = total.item()
    _finite_or_raise(components)

    optimizers["main"].zero_grad()
    ad.backward(total)
    if config.grad_clip > 0:
        clip_global_norm(optimizers["main"].params, config.grad_clip)
    optimizers["main"].step()
    optimizers["main"].zero_grad()
    return components


def latents_concat(latents):
    return model.concat_latents(latents)


def encode_statements(vocab, statements):
    return [vocab.encode(list(s.tokens)) for s in statements]


def evaluate_loss(system, statements, rng, batch_size=256):
    """Mean loss components on a split: no dropout, full teacher forcing,
    one posterior sample per statement drawn from rng."""
    weights = system.config.weights()
    seqs = encode_statements(system.vocab, statements)
    sums = {}
    count = 0
    with ad.no_grad():
        for lo in range(0, len(seqs), batch_size):
            chunk = seqs[lo : lo + batch_size]
            stmts = statements[lo : lo + batch_size]
            tokens, lengths = model.pad_batch(chunk)
            labels = batch_labels(stmts)
            params_by_space = system.model.posterior(tokens, lengths, noise=None)
            eps = {
                s: rng.standard_normal((len(chunk), d))
                for s, d in system.spec.latent_dims.items()
            }
            latents = system.model.sample_latents(params_by_space, eps)
            targets = model.decoder_targets(tokens, lengths)
            logits = system.model.decoder.decode(latents_concat(latents), targets)
            rec = model.reconstruction_loss(logits, targets)
            kls = {s: model.kl_standard_normal(p) for s, p in params_by_space.items()}
            elbo = model.elbo_loss(rec, kls, weights.betas)
            comp = {"rec": rec.item(), "elbo": elbo.item()}
            for s, kl in kls.items():
                comp[f"kl_{s}"] = kl.item()
            if system.probes is not None:
                comp["inf"] = objectives.inf_total(system.probes, latents, labels).item()
            if system.adversaries is not None:
                cls_total, adv_term = objectives.adv_total(
                    system.adversaries, latents, labels
                )
                comp["adv_cls"] = cls_total.item()
                comp["adv_ent"] = -adv_term.item()
            if system.clubs is not None:
                comp["min"] = objectives.min_loss(system.clubs, latents).item()
            w = len(chunk)
            for k, v in comp.items():
                sums[k] = sums.get(k, 0.0) + v * w
            count += w
    return {k: v / count for k, v in sums.items()}


def _mu_latents(system, statements, batch_size=512):
    seqs = encode_statements(system.vocab, statements)
    mus = {s: [] for s in model.SPACES}
    for lo in range(0, len(seqs), batch_size):
        tokens, lengths = model.pad_batch(seqs[lo : lo + batch_size])
        arrays = system.model.posterior_arrays(tokens, lengths)
        for s, (mu, _) in arrays.items():
            mus[s].append(mu)
    return {s: np.concatenate(v, axis=0) for s, v in mus.items()}


def dev_probe_f1(system, train_statements, dev_statements, rng):
    """Post-hoc probe F1 per target factor on dev posterior means.

    Probes are refit each epoch on a capped train subsample so the metric
    is comparable across objective sets (the ELBO-only baseline has no
    supervision probes of its own).
    """
    cap = system.config.probe_fit_cap
    if len(train_statements) > cap:
        pick = rng.choice(len(train_statements), size=cap, replace=False)
        train_statements = [train_statements[i] for i in sorted(pick)]
    mu_train = _mu_latents(system, train_statements)
    mu_dev = _mu_latents(system, dev_statements)
    y_train = batch_labels(train_statements)
    y_dev = batch_labels(dev_statements)
    out = {}
    for k in ("n", "u"):
        if len(np.unique(y_train[k])) < 2 or len(np.unique(y_dev[k])) < 2:
            out[k] = 0.0
            continue
        probe = LogisticProbe().fit(mu_train[k], y_train[k])
        _, _, f1 = macro_prf(y_dev[k], probe.predict(mu_dev[k]))
        out[k] = f1
    return out


def train(config, splits, out_dir=None, resume_from=None, log_every=50):
    """Run the full training loop on train/dev splits.

    Writes best/last checkpoints and a line-delimited metrics log when
    out_dir is given and returns (system, history). Resuming recreates
    the exact remaining epochs of an uninterrupted run with the same seed.
    """
    for name in ("train", "dev"):
        if name not in splits or not splits[name].statements:
            raise ValueError(f"missing or empty split {name!r}")
    from .corpus import dataset_fingerprint

    fingerprint = dataset_fingerprint(splits)
    train_stmts = splits["train"].statements
    dev_stmts = splits["dev"].statements

    if resume_from is not None:
        system, optimizers, start_epoch, history = load_checkpoint(resume_from)
        if system.config.to_dict() != config.to_dict():
            raise ValueError("resume config differs from checkpoint config")
    else:
        vocab = build_vocabulary(train_stmts, config.min_frequency)
        system = System(config, vocab, derive_rng(config.seed, 0))
        optimizers = make_optimizers(system)
        start_epoch = 0
        history = []

    out_dir = Path(out_dir) if out_dir is not None else None
    log_fh = None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        config.save(out_dir / "config.json")
        log_fh = open(out_dir / "metrics.jsonl", "a", encoding="utf-8")

    seqs = encode_statements(system.vocab, train_stmts)
    best_f1 = max((h["dev_probe_f1_mean"] for h in history), default=-1.0)
    try:
        for epoch in range(start_epoch + 1, config.epochs + 1):
            rng_epoch = derive_rng(config.seed, 1, epoch)
            rng_eval = derive_rng(config.seed, 2, epoch)
            perm = rng_epoch.permutation(len(seqs))
            step = 0
            epoch_sums = {}
            for lo in range(0, len(perm), config.batch_size):
                idx = perm[lo : lo + config.batch_size]
                batch_stmts = [train_stmts[i] for i in idx]
                tokens, lengths = model.pad_batch([seqs[i] for i in idx])
                labels = batch_labels(batch_stmts)
                noise = model.make_train_noise(
                    rng_epoch, system.spec, len(idx), tokens.shape[1],
                    config.teacher_forcing_p,
                )
                components = train_step(
                    system, tokens, lengths, labels, optimizers, noise
                )
                step += 1
                for k, v in components.items():
                    epoch_sums[k] = epoch_sums.get(k, 0.0) + v
                if log_fh is not None and (step % log_every == 0 or lo == 0):
                    rec = {"epoch": epoch, "step": step, **components}
                    log_fh.write(json.dumps(rec) + "\n")

            dev_components = evaluate_loss(system, dev_stmts, rng_eval)
            probe_f1 = dev_probe_f1(system, train_stmts, dev_stmts, rng_eval)
            entry = {
                "epoch": epoch,
                "train": {k: v / step for k, v in epoch_sums.items()},
                "dev": dev_components,
                "dev_probe_f1_n": probe_f1["n"],
                "dev_probe_f1_u": probe_f1["u"],
                "dev_probe_f1_mean": (probe_f1["n"] + probe_f1["u"]) / 2.0,
            }
            history.append(entry)
            if log_fh is not None:
                log_fh.write(json.dumps({"epoch": epoch, "dev": entry["dev"],
                                         "probe_f1": probe_f1}) + "\n")
                log_fh.flush()
            if out_dir is not None:
                save_checkpoint(
                    out_dir / "last.npz", system, optimizers, epoch, history,
                    fingerprint,
                )
                if entry["dev_probe_f1_mean"] >= best_f1:
                    best_f1 = entry["dev_probe_f1_mean"]
                    save_checkpoint(
                        out_dir / "best.npz", system, optimizers, epoch, history,
                        fingerprint,
                    )
    finally:
        if log_fh is not None:
            log_fh.close()
    return system, history


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def save_checkpoint(path, system, optimizers, epoch, history, fingerprint=""):
    arrays = {}
    for name, t in system.all_params().items():
        arrays[f"p/{name}"] = t.data
    for gname, opt in optimizers.items():
        for pname in opt.params:
            arrays[f"m/{gname}/{pname}"] = opt.m[pname]
            arrays[f"v/{gname}/{pname}"] = opt.v[pname]
    meta = {
        "version": CHECKPOINT_VERSION,
        "config": system.config.to_dict(),
        "config_hash": system.config.config_hash(),
        "vocab": system.vocab.tokens,
        "epoch": epoch,
        "history": history,
        "data_fingerprint": fingerprint,
        "optimizer_steps": {g: opt.t for g, opt in optimizers.items()},
        "seed": system.config.seed,
    }
    arrays["__meta__"] = np.array(json.dumps(meta))
    np.savez(path, **arrays)


def load_checkpoint(path):
    with np.load(path, allow_pickle=False) as data:
        meta = json.loads(str(data["__meta__"]))
        arrays = {k: data[k] for k in data.files if k != "__meta__"}
    if meta["version"] != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {meta['version']}")
    config = TrainConfig.from_dict(meta["config"])
    vocab = Vocabulary(meta["vocab"])
    system = System(config, vocab, derive_rng(config.seed, 0))
    for name, t in system.all_params().items():
        loaded = arrays[f"p/{name}"]
        if loaded.shape != t.data.shape:
            raise ValueError(f"checkpoint shape mismatch for {name}")
        t.data = loaded.copy()
    optimizers = make_optimizers(system)
    for gname, opt in optimizers.items():
        opt.t = meta["optimizer_steps"][gname]
        for pname in opt.params:
            opt.m[pname] = arrays[f"m/{gname}/{pname}"].copy()
            opt.v[pname] = arrays[f"v/{gname}/{pname}"].copy()
    return system, optimizers, meta["epoch"], meta["history"]
