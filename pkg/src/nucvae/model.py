"""Factored-latent sequence VAE.

A 2-layer BiLSTM encoder summarizes a statement into the top layer's two
directional final states; three affine heads map that summary to Gaussian
posterior parameters for the negation (1-d), uncertainty (1-d), and content
(62-d) spaces; samples z = mu + sigma * eps are concatenated as [n; u; c]
and an affine map turns them into the initial states of a 2-layer LSTM
decoder that reconstructs the statement token by token.

Training-time stochasticity (word dropout, inter-layer dropout, teacher
forcing coins, posterior noise) is passed in explicitly as a TrainNoise
bundle so that a loss evaluation is a deterministic function of parameters
and noise; the trainer owns the random stream.
"""

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .corpus import BOS, EOS, PAD, RESERVED_TOKENS, UNK

SPACES = ("n", "u", "c")
FACTOR_KEYS = ("n", "u")
N_RESERVED = len(RESERVED_TOKENS)


@dataclass
class ModelSpec:
    vocab_size: int
    embedding_dim: int = 256
    hidden_dim: int = 256
    num_layers: int = 2
    latent_dims: dict = field(default_factory=lambda: {"n": 1, "u": 1, "c": 62})
    word_dropout: float = 0.5
    dropout: float = 0.5

    @property
    def latent_total(self):
        return sum(self.latent_dims.values())

    @property
    def summary_dim(self):
        return 2 * self.hidden_dim


@dataclass
class GaussianParams:
    """Diagonal Gaussian posterior (mu, sigma) with sigma = exp(logvar / 2)."""

    mu: Tensor
    logvar: Tensor
    sigma: Tensor

    @classmethod
    def from_mu_logvar(cls, mu, logvar):
        return cls(mu=mu, logvar=logvar, sigma=ad.exp(0.5 * logvar))


@dataclass
class TrainNoise:
    """All stochastic draws used by one training-mode forward pass."""

    enc_keep: np.ndarray          # (B, T) bool, False = replace with UNK
    dec_keep: np.ndarray          # (B, T+1) bool
    enc_drop: list                # per layer boundary, (B, T, 2H) scaled masks
    dec_drop: list                # per layer boundary, (B, T+1, H) scaled masks
    eps: dict                     # space -> (B, d) standard normal draws
    tf_gold: np.ndarray           # (B, T+1) bool, True = feed gold token


def make_train_noise(rng, spec, batch, tsteps, teacher_forcing_p):
    steps = tsteps + 1
    scale_keep = 1.0 / (1.0 - spec.dropout) if spec.dropout < 1.0 else 0.0
    enc_drop = [
        (rng.random((batch, tsteps, 2 * spec.hidden_dim)) >= spec.dropout) * scale_keep
        for _ in range(spec.num_layers - 1)
    ]
    dec_drop = [
        (rng.random((batch, steps, spec.hidden_dim)) >= spec.dropout) * scale_keep
        for _ in range(spec.num_layers - 1)
    ]
    return TrainNoise(
        enc_keep=rng.random((batch, tsteps)) >= spec.word_dropout,
        dec_keep=rng.random((batch, steps)) >= spec.word_dropout,
        enc_drop=enc_drop,
        dec_drop=dec_drop,
        eps={s: rng.standard_normal((batch, d)) for s, d in spec.latent_dims.items()},
        tf_gold=rng.random((batch, steps)) < teacher_forcing_p,
    )


def _apply_word_dropout(idx, keep):
    return np.where(keep | (idx < N_RESERVED), idx, np.int64(UNK))


def _uniform_param(rng, shape, scale):
    return Tensor(rng.uniform(-scale, scale, size=shape), requires_grad=True)


class Encoder:
    """Bidirectional multi-layer LSTM; parameters phi (including embeddings)."""

    def __init__(self, spec, rng):
        self.spec = spec
        k = 1.0 / np.sqrt(spec.hidden_dim)
        self.embedding = Tensor(
            rng.uniform(-0.1, 0.1, size=(spec.vocab_size, spec.embedding_dim)),
            requires_grad=True,
        )
        self.layers = []
        in_dim = spec.embedding_dim
        for _ in range(spec.num_layers):
            layer = {}
            for direction in ("fwd", "bwd"):
                layer[direction] = (
                    _uniform_param(rng, (in_dim, 4 * spec.hidden_dim), k),
                    _uniform_param(rng, (spec.hidden_dim, 4 * spec.hidden_dim), k),
                    _uniform_param(rng, (4 * spec.hidden_dim,), k),
                )
            self.layers.append(layer)
            in_dim = 2 * spec.hidden_dim

    def params(self):
        out = {"embedding": self.embedding}
        for li, layer in enumerate(self.layers):
            for direction, (w, u, b) in layer.items():
                out[f"l{li}.{direction}.w"] = w
                out[f"l{li}.{direction}.u"] = u
                out[f"l{li}.{direction}.b"] = b
        return out

    def __call__(self, tokens, lengths, noise=None):
        """Summary vector (B, 2H): top layer's directional final states."""
        tokens = np.asarray(tokens, dtype=np.int64)
        lengths = np.asarray(lengths, dtype=np.int64)
        if tokens.ndim != 2 or tokens.shape[1] < 1 or np.any(lengths < 1):
            raise ValueError("encoder requires non-empty token sequences")
        idx = tokens if noise is None else _apply_word_dropout(tokens, noise.enc_keep)
        x = ad.embedding(self.embedding, idx)
        last = lengths - 1
        h_fwd_last = h_bwd_last = None
        for li, layer in enumerate(self.layers):
            h_fwd = ad.lstm_seq(x, lengths, *layer["fwd"])
            x_rev = ad.reverse_within_length(x, lengths)
            h_bwd_rev = ad.lstm_seq(x_rev, lengths, *layer["bwd"])
            h_bwd = ad.reverse_within_length(h_bwd_rev, lengths)
            x = ad.concat([h_fwd, h_bwd], axis=2)
            if noise is not None and li < len(self.layers) - 1:
                x = ad.mul(x, Tensor(noise.enc_drop[li]))
            h_fwd_last = ad.rows_at_time(h_fwd, last)
            h_bwd_last = ad.rows_at_time(h_bwd_rev, last)
        return ad.concat([h_fwd_last, h_bwd_last], axis=1)


class LatentHeads:
    """Per-space affine maps from the encoder summary to (mu, logvar)."""

    def __init__(self, spec, rng):
        self.spec = spec
        k = 1.0 / np.sqrt(spec.summary_dim)
        self.maps = {}
        for space, dim in spec.latent_dims.items():
            self.maps[space] = {
                "mu_w": _uniform_param(rng, (spec.summary_dim, dim), k),
                "mu_b": _uniform_param(rng, (dim,), k),
                "lv_w": _uniform_param(rng, (spec.summary_dim, dim), k),
                "lv_b": _uniform_param(rng, (dim,), k),
            }

    def params(self):
        return {
            f"{space}.{name}": t
            for space, m in self.maps.items()
            for name, t in m.items()
        }

    def __call__(self, summary):
        if summary.data.shape[1] != self.spec.summary_dim:
            raise ValueError(
                f"summary dim {summary.data.shape[1]} != {self.spec.summary_dim}"
            )
        out = {}
        for space, m in self.maps.items():
            mu = ad.affine(summary, m["mu_w"], m["mu_b"])
            logvar = ad.affine(summary, m["lv_w"], m["lv_b"])
            out[space] = GaussianParams.from_mu_logvar(mu, logvar)
        return out


def reparameterize(params, eps):
    """z = mu + sigma * eps for one latent space."""
    eps = np.asarray(eps, dtype=np.float64)
    if eps.shape != params.mu.data.shape:
        raise ValueError(f"noise shape {eps.shape} != mu shape {params.mu.data.shape}")
    return ad.add(params.mu, ad.mul(params.sigma, Tensor(eps)))


def concat_latents(z_by_space):
    return ad.concat([z_by_space[s] for s in SPACES], axis=1)


def kl_standard_normal(params):
    """KL(N(mu, sigma^2) || N(0, I)), summed over dims, averaged over batch."""
    sigma = params.sigma.data
    if np.any(sigma <= 0) or not np.all(np.isfinite(sigma)):
        raise ValueError("sigma must be positive and finite")
    per_dim = 0.5 * (
        ad.square(params.mu)
        + ad.exp(params.logvar)
        - 1.0
        - params.logvar
    )
    per_example = ad.tsum(per_dim, axis=1) if params.mu.data.ndim == 2 else ad.tsum(per_dim)
    return ad.tmean(per_example) if params.mu.data.ndim == 2 else per_example


class Decoder:
    """Autoregressive LSTM conditioned on z through its initial states."""

    def __init__(self, spec, rng):
        self.spec = spec
        k = 1.0 / np.sqrt(spec.hidden_dim)
        z_dim = spec.latent_total
        self.embedding = Tensor(
            rng.uniform(-0.1, 0.1, size=(spec.vocab_size, spec.embedding_dim)),
            requires_grad=True,
        )
        self.init_w = _uniform_param(
            rng, (z_dim, spec.num_layers * 2 * spec.hidden_dim), 1.0 / np.sqrt(z_dim)
        )
        self.init_b = _uniform_param(
            rng, (spec.num_layers * 2 * spec.hidden_dim,), 1.0 / np.sqrt(z_dim)
        )
        self.layers = []
        in_dim = spec.embedding_dim
        for _ in range(spec.num_layers):
            self.layers.append(
                (
                    _uniform_param(rng, (in_dim, 4 * spec.hidden_dim), k),
                    _uniform_param(rng, (spec.hidden_dim, 4 * spec.hidden_dim), k),
                    _uniform_param(rng, (4 * spec.hidden_dim,), k),
                )
            )
            in_dim = spec.hidden_dim
        self.out_w = _uniform_param(rng, (spec.hidden_dim, spec.vocab_size), k)
        self.out_b = _uniform_param(rng, (spec.vocab_size,), k)

    def params(self):
        out = {
            "embedding": self.embedding,
            "init_w": self.init_w,
            "init_b": self.init_b,
            "out_w": self.out_w,
            "out_b": self.out_b,
        }
        for li, (w, u, b) in enumerate(self.layers):
            out[f"l{li}.w"] = w
            out[f"l{li}.u"] = u
            out[f"l{li}.b"] = b
        return out

    def _initial_states(self, z):
        hdim = self.spec.hidden_dim
        init = ad.affine(z, self.init_w, self.init_b)
        states = []
        for li in range(self.spec.num_layers):
            h = ad.narrow(init, 1, li * 2 * hdim, hdim)
            c = ad.narrow(init, 1, li * 2 * hdim + hdim, hdim)
            states.append((h, c))
        return states

    def _step(self, x, states, noise, t):
        hdim = self.spec.hidden_dim
        new_states = []
        for li, (w, u, b) in enumerate(self.layers):
            h_prev, c_prev = states[li]
            hc = ad.lstm_cell(x, h_prev, c_prev, w, u, b)
            h = ad.narrow(hc, 1, 0, hdim)
            c = ad.narrow(hc, 1, hdim, hdim)
            new_states.append((h, c))
            x = h
            if noise is not None and li < len(self.layers) - 1:
                x = ad.mul(x, Tensor(noise.dec_drop[li][:, t]))
        return x, new_states

    def decode(self, z, targets, noise=None):
        """Per-step logits for the shifted targets [x_1..x_T, EOS].

        targets has T+1 columns (see decoder_targets); step t predicts
        targets[:, t]. The input at step 0 is BOS and at later steps
        either the gold previous token or the decoder's own argmax, per
        the teacher-forcing coins in noise (no noise = all gold). Word
        dropout applies to the chosen input tokens.
        """
        targets = np.asarray(targets, dtype=np.int64)
        batch, steps = targets.shape
        states = self._initial_states(z)
        logits_steps = []
        prev_argmax = None
        for t in range(steps):
            if t == 0:
                idx = np.full(batch, BOS, dtype=np.int64)
            else:
                gold = targets[:, t - 1]
                if noise is None:
                    idx = gold
                else:
                    idx = np.where(noise.tf_gold[:, t], gold, prev_argmax)
                    idx = _apply_word_dropout(idx, noise.dec_keep[:, t])
            x = ad.embedding(self.embedding, idx)
            out, states = self._step(x, states, noise, t)
            logits = ad.affine(out, self.out_w, self.out_b)
            logits_steps.append(logits)
            prev_argmax = logits.data.argmax(axis=1)
        return logits_steps

    def generate(self, z, max_length):
        """Greedy argmax decoding until EOS or max_length tokens."""
        if max_length < 1:
            raise ValueError("max_length must be >= 1")
        with ad.no_grad():
            batch = z.data.shape[0]
            states = self._initial_states(z)
            idx = np.full(batch, BOS, dtype=np.int64)
            done = np.zeros(batch, dtype=bool)
            seqs = [[] for _ in range(batch)]
            for _ in range(max_length):
                x = ad.embedding(self.embedding, idx)
                out, states = self._step(x, states, None, 0)
                logits = ad.affine(out, self.out_w, self.out_b)
                idx = logits.data.argmax(axis=1)
                for b in range(batch):
                    if done[b]:
                        continue
                    if idx[b] == EOS:
                        done[b] = True
                    else:
                        seqs[b].append(int(idx[b]))
                if done.all():
                    break
        return seqs


class SeqVAE:
    """Encoder, latent heads, and decoder with grouped parameters."""

    def __init__(self, spec, rng):
        self.spec = spec
        self.encoder = Encoder(spec, rng)
        self.heads = LatentHeads(spec, rng)
        self.decoder = Decoder(spec, rng)

    def param_groups(self):
        return {
            "encoder": self.encoder.params(),
            "heads": self.heads.params(),
            "decoder": self.decoder.params(),
        }

    def params(self):
        out = {}
        for group, params in self.param_groups().items():
            for name, t in params.items():
                out[f"{group}.{name}"] = t
        return out

    def posterior(self, tokens, lengths, noise=None):
        summary = self.encoder(tokens, lengths, noise)
        return self.heads(summary)

    def sample_latents(self, params_by_space, eps_by_space):
        return {
            space: reparameterize(params_by_space[space], eps_by_space[space])
            for space in SPACES
        }

    def posterior_arrays(self, tokens, lengths):
        """Inference-mode (mu, sigma) numpy arrays per space."""
        with ad.no_grad():
            params = self.posterior(tokens, lengths, noise=None)
        return {
            space: (p.mu.data.copy(), p.sigma.data.copy())
            for space, p in params.items()
        }


def pad_batch(token_id_seqs):
    """Right-pad variable-length id sequences; returns (ids, lengths)."""
    lengths = np.array([len(s) for s in token_id_seqs], dtype=np.int64)
    batch = len(token_id_seqs)
    width = int(lengths.max())
    out = np.full((batch, width), PAD, dtype=np.int64)
    for i, seq in enumerate(token_id_seqs):
        out[i, : len(seq)] = seq
    return out, lengths


def decoder_targets(tokens, lengths):
    """Shift targets for BOS/EOS framing: row b is [x_1..x_T, EOS, PAD...]."""
    tokens = np.asarray(tokens, dtype=np.int64)
    batch, width = tokens.shape
    out = np.full((batch, width + 1), PAD, dtype=np.int64)
    out[:, :width] = tokens
    out[np.arange(batch), lengths] = EOS
    return out


def reconstruction_loss(logits_steps, targets):
    """Masked token NLL, summed over time steps, averaged over the batch."""
    targets = np.asarray(targets, dtype=np.int64)
    batch, steps = targets.shape
    if steps != len(logits_steps):
        raise ValueError("targets and logits step counts differ")
    total = None
    for t, logits in enumerate(logits_steps):
        mask = (targets[:, t] != PAD).astype(np.float64)
        nll = ad.softmax_nll(logits, targets[:, t], mask)
        total = nll if total is None else ad.add(total, nll)
    return ad.mul(ad.tsum(total), 1.0 / batch)


def elbo_loss(rec_loss, kl_by_space, betas):
    """rec + sum_l beta_l * KL_l over the three latent spaces."""
    out = rec_loss
    for space in SPACES:
        beta = betas[space]
        if beta < 0:
            raise ValueError("KL weights must be nonnegative")
        out = ad.add(out, ad.mul(kl_by_space[space], beta))
    return out
