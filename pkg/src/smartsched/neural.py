"""Small fully connected networks with hand-written backprop.

Two agent layouts share the same building block:

* one-pass: the policy sees all K UEs' features concatenated (4K inputs,
  K logits); the value net sees the same concatenation.
* scalable: one shared policy net maps each UE's 4 features to a logit and
  is applied K times; the value net reads the mean of the per-UE features.

Inactive UEs get ``MASK_SHIFT`` subtracted from their logits before the
softmax. Everything runs in float64.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass

import numpy as np

MASK_SHIFT = 1e9
CHECKPOINT_FORMAT = "smartsched-checkpoint"
CHECKPOINT_VERSION = 1
FEATURES_PER_UE = 4


class CheckpointMismatch(ValueError):
    """Checkpoint shapes or architecture do not fit the requested use."""


class MLP:
    """ReLU hidden layers, identity output. Weights are stored (fan_in, fan_out)."""

    def __init__(self, sizes, rng: np.random.Generator | None = None, weights=None, biases=None):
        self.sizes = [int(s) for s in sizes]
        if len(self.sizes) < 2:
            raise ValueError("an MLP needs at least input and output sizes")
        if weights is not None:
            self.weights = [np.asarray(w, dtype=np.float64) for w in weights]
            self.biases = [np.asarray(b, dtype=np.float64) for b in biases]
            self._check_shapes()
            return
        rng = rng if rng is not None else np.random.default_rng(0)
        self.weights, self.biases = [], []
        for fan_in, fan_out in zip(self.sizes[:-1], self.sizes[1:]):
            lim = 1.0 / np.sqrt(fan_in)
            self.weights.append(rng.uniform(-lim, lim, (fan_in, fan_out)))
            self.biases.append(rng.uniform(-lim, lim, fan_out))

    def _check_shapes(self) -> None:
        if len(self.weights) != len(self.sizes) - 1 or len(self.biases) != len(self.weights):
            raise CheckpointMismatch("layer count does not match sizes")
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.shape != (self.sizes[i], self.sizes[i + 1]) or b.shape != (self.sizes[i + 1],):
                raise CheckpointMismatch(
                    f"layer {i}: got W{w.shape} b{b.shape}, expected W{(self.sizes[i], self.sizes[i + 1])}")

    @property
    def params(self) -> list[np.ndarray]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out

    def copy(self) -> "MLP":
        return MLP(self.sizes, weights=[w.copy() for w in self.weights], biases=[b.copy() for b in self.biases])

    def forward(self, x):
        x = np.asarray(x, dtype=np.float64)
        if x.shape[-1] != self.sizes[0]:
            raise ValueError(f"input width {x.shape[-1]} != {self.sizes[0]}")
        acts = [x]
        pre = []
        h = x
        last = len(self.weights) - 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            z = h @ w + b
            pre.append(z)
            h = z if i == last else np.maximum(z, 0.0)
            if i != last:
                acts.append(h)
        return h, (acts, pre)

    def backward(self, cache, dout) -> list[np.ndarray]:
        """Gradients of sum(dout * output) w.r.t. [W0, b0, W1, b1, ...]."""
        acts, pre = cache
        grads = [None] * (2 * len(self.weights))
        g = np.asarray(dout, dtype=np.float64)
        for i in range(len(self.weights) - 1, -1, -1):
            if i != len(self.weights) - 1:
                g = g * (pre[i] > 0)
            grads[2 * i] = acts[i].T @ g
            grads[2 * i + 1] = g.sum(axis=0)
            if i > 0:
                g = g @ self.weights[i].T
        return grads


def relu(x):
    return np.maximum(np.asarray(x, dtype=np.float64), 0.0)


def masked_softmax(logits, mask):
    z = np.asarray(logits, dtype=np.float64) - MASK_SHIFT * (1.0 - np.asarray(mask, dtype=np.float64))
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True), z


@dataclass
class PolicyOutput:
    probs: np.ndarray    # (M, K)
    logits: np.ndarray   # (M, K) raw network logits
    mask: np.ndarray     # (M, K) bool
    log_probs: np.ndarray
    cache: tuple

    def entropy(self) -> np.ndarray:
        return entropy(self.probs, self.mask)


def entropy(probs, mask) -> np.ndarray:
    p = np.asarray(probs, dtype=np.float64)
    m = np.asarray(mask, dtype=bool) & (p > 0)
    plogp = np.where(m, p * np.log(np.where(m, p, 1.0)), 0.0)
    return -plogp.sum(axis=-1)


def _policy_output(logits, mask, cache) -> PolicyOutput:
    mask = np.asarray(mask, dtype=bool)
    if not mask.any(axis=-1).all():
        raise ValueError("every policy row needs at least one active UE")
    probs, z = masked_softmax(logits, mask)
    logp = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
    return PolicyOutput(probs, logits, mask, logp, cache)


def policy_one_pass(net: MLP, states, mask) -> PolicyOutput:
    """states: (M, K, 4) per-UE features, concatenated into (M, 4K)."""
    s = np.asarray(states, dtype=np.float64)
    m, k, f = s.shape
    logits, cache = net.forward(s.reshape(m, k * f))
    if logits.shape[1] != k:
        raise CheckpointMismatch(f"one-pass policy built for {logits.shape[1]} UEs, got {k}")
    return _policy_output(logits, mask, cache)


def policy_scalable(net: MLP, states, mask) -> PolicyOutput:
    """states: (M, K, 4); one shared net scores every UE."""
    s = np.asarray(states, dtype=np.float64)
    m, k, f = s.shape
    out, cache = net.forward(s.reshape(m * k, f))
    return _policy_output(out.reshape(m, k), mask, cache)


def policy_loss_grad(out: PolicyOutput, actions, advantages, entropy_weight: float):
    """Loss -(sum A log pi(a) + lambda_e * sum H) and its gradient w.r.t. the raw logits.

    Rows with action < 0 (idle decisions) contribute nothing.
    """
    a = np.asarray(actions, dtype=np.int64)
    adv = np.asarray(advantages, dtype=np.float64)
    use = a >= 0
    p, logp, mask = out.probs, out.log_probs, out.mask
    rows = np.flatnonzero(use)
    h = entropy(p, mask)
    safe_logp = np.where(mask & (p > 0), logp, 0.0)
    loss = -float(np.sum(adv[rows] * logp[rows, a[rows]])) - entropy_weight * float(h[use].sum())
    onehot = np.zeros_like(p)
    onehot[rows, a[rows]] = 1.0
    d = -adv[:, None] * (onehot - p) + entropy_weight * p * (safe_logp + h[:, None])
    d[~use] = 0.0
    return loss, d


def policy_backward(net: MLP, out: PolicyOutput, dlogits, scalable: bool) -> list[np.ndarray]:
    g = np.asarray(dlogits, dtype=np.float64)
    if scalable:
        g = g.reshape(-1, 1)
    return net.backward(out.cache, g)


def value_estimate(net: MLP, summary):
    """summary: (M, d) value-net input; returns ((M,) values, cache)."""
    v, cache = net.forward(summary)
    return v[:, 0], cache


def sample_action(out_or_probs, rng: np.random.Generator | None = None, greedy: bool = False) -> np.ndarray:
    """One UE index per row; ``greedy`` takes the argmax (lowest index on ties)."""
    p = out_or_probs.probs if isinstance(out_or_probs, PolicyOutput) else np.asarray(out_or_probs, dtype=float)
    p = np.atleast_2d(p)
    if greedy:
        return np.argmax(p, axis=1)
    c = np.cumsum(p, axis=1)
    u = rng.random(p.shape[0]) * c[:, -1]
    idx = np.array([np.searchsorted(c[i], u[i], side="right") for i in range(p.shape[0])])
    return np.minimum(idx, p.shape[1] - 1)


class ActorCritic:
    """Policy + value networks for one architecture."""

    def __init__(self, architecture: str, policy: MLP, value: MLP, num_ues: int | None, hidden: int):
        if architecture not in ("scalable", "one_pass"):
            raise ValueError(f"unknown architecture {architecture!r}")
        self.architecture = architecture
        self.policy = policy
        self.value = value
        self.num_ues = num_ues if architecture == "one_pass" else None
        self.hidden = hidden

    @property
    def scalable(self) -> bool:
        return self.architecture == "scalable"

    @classmethod
    def build(cls, architecture: str, num_ues: int, hidden: int = 128, rng=None) -> "ActorCritic":
        rng = rng if rng is not None else np.random.default_rng(0)
        f = FEATURES_PER_UE
        if architecture == "scalable":
            policy = MLP([f, hidden, hidden, 1], rng)
            value = MLP([f, hidden, hidden, 1], rng)
        elif architecture == "one_pass":
            width = hidden * num_ues
            policy = MLP([f * num_ues, width, width, num_ues], rng)
            value = MLP([f * num_ues, width, width, 1], rng)
        else:
            raise ValueError(f"unknown architecture {architecture!r}")
        return cls(architecture, policy, value, num_ues, hidden)

    def check_num_ues(self, k: int) -> None:
        if not self.scalable and k != self.num_ues:
            raise CheckpointMismatch(f"one-pass agent was built for K={self.num_ues}, environment has K={k}")

    def policy_forward(self, states, mask) -> PolicyOutput:
        if self.scalable:
            return policy_scalable(self.policy, states, mask)
        self.check_num_ues(np.shape(states)[1])
        return policy_one_pass(self.policy, states, mask)

    def policy_grads(self, out: PolicyOutput, dlogits):
        return policy_backward(self.policy, out, dlogits, self.scalable)

    def value_input(self, states) -> np.ndarray:
        s = np.asarray(states, dtype=np.float64)
        if self.scalable:
            return s.mean(axis=1)
        self.check_num_ues(s.shape[1])
        return s.reshape(s.shape[0], -1)

    def value_forward(self, states):
        return value_estimate(self.value, self.value_input(states))

    def copy(self) -> "ActorCritic":
        return ActorCritic(self.architecture, self.policy.copy(), self.value.copy(), self.num_ues, self.hidden)

    # -- checkpoint IO ----------------------------------------------------------

    def to_dict(self) -> dict:
        return {
            "format": CHECKPOINT_FORMAT,
            "version": CHECKPOINT_VERSION,
            "architecture": self.architecture,
            "num_ues": self.num_ues,
            "hidden": self.hidden,
            "policy": _net_dict(self.policy),
            "value": _net_dict(self.value),
        }

    def save(self, path: str) -> None:
        d = os.path.dirname(path)
        if d:
            os.makedirs(d, exist_ok=True)
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, separators=(",", ":"))
            fh.write("\n")

    @classmethod
    def from_dict(cls, data: dict) -> "ActorCritic":
        if data.get("format") != CHECKPOINT_FORMAT or data.get("version") != CHECKPOINT_VERSION:
            raise CheckpointMismatch("not a smartsched checkpoint (format/version)")
        arch = data["architecture"]
        k = data.get("num_ues")
        hidden = int(data["hidden"])
        agent = cls(arch, _net_from_dict(data["policy"]), _net_from_dict(data["value"]), k, hidden)
        ref = cls.build(arch, k or 1, hidden)
        for name, got, want in (("policy", agent.policy, ref.policy), ("value", agent.value, ref.value)):
            if got.sizes != want.sizes:
                raise CheckpointMismatch(f"{name} layer sizes {got.sizes} do not match {arch} layout {want.sizes}")
        return agent

    @classmethod
    def load(cls, path: str, num_ues: int | None = None) -> "ActorCritic":
        if not os.path.exists(path):
            raise FileNotFoundError(f"checkpoint not found: {path}")
        with open(path) as fh:
            agent = cls.from_dict(json.load(fh))
        if num_ues is not None:
            agent.check_num_ues(num_ues)
        return agent


def _net_dict(net: MLP) -> dict:
    return {
        "sizes": net.sizes,
        "layers": [
            {"W": {"shape": list(w.shape), "values": w.ravel().tolist()},
             "b": {"shape": list(b.shape), "values": b.tolist()}}
            for w, b in zip(net.weights, net.biases)
        ],
    }


def _net_from_dict(d: dict) -> MLP:
    ws, bs = [], []
    for i, layer in enumerate(d["layers"]):
        for key, store in (("W", ws), ("b", bs)):
            shape = tuple(layer[key]["shape"])
            vals = np.asarray(layer[key]["values"], dtype=np.float64)
            if vals.size != int(np.prod(shape)):
                raise CheckpointMismatch(f"layer {i} {key}: {vals.size} values for shape {shape}")
            store.append(vals.reshape(shape))
    return MLP(d["sizes"], weights=ws, biases=bs)


# --- finite-difference verification -------------------------------------------

def _fd_check(loss_fn, params, grads, rng, eps: float, max_coords: int | None) -> float:
    """Max relative error between analytic ``grads`` and central differences of ``loss_fn``."""
    worst = 0.0
    for p, g in zip(params, grads):
        flat = p.reshape(-1)
        gflat = g.reshape(-1)
        idx = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            idx = rng.choice(flat.size, max_coords, replace=False)
        for i in idx:
            old = flat[i]
            flat[i] = old + eps
            lp = loss_fn()
            flat[i] = old - eps
            lm = loss_fn()
            flat[i] = old
            num = (lp - lm) / (2 * eps)
            den = max(abs(num), abs(gflat[i]), 1e-5)
            worst = max(worst, abs(num - gflat[i]) / den)
    return worst


def gradcheck_agent(agent: ActorCritic, num_ues: int, rng: np.random.Generator, batch: int = 4,
                    eps: float = 1e-5, max_coords: int | None = None,
                    entropy_weight: float = 0.03, value_weight: float = 0.5) -> dict[str, float]:
    """Check policy (A2C policy + entropy objective) and value (squared-error) gradients."""
    states = rng.uniform(0.0, 1.0, (batch, num_ues, FEATURES_PER_UE))
    mask = rng.random((batch, num_ues)) < 0.7
    mask[np.arange(batch), rng.integers(0, num_ues, batch)] = True
    actions = np.array([rng.choice(np.flatnonzero(m)) for m in mask])
    adv = rng.normal(size=batch)
    target = rng.normal(size=batch)

    def policy_loss():
        return policy_loss_grad(agent.policy_forward(states, mask), actions, adv, entropy_weight)[0]

    out = agent.policy_forward(states, mask)
    _, dlog = policy_loss_grad(out, actions, adv, entropy_weight)
    pg = agent.policy_grads(out, dlog)
    pol_err = _fd_check(policy_loss, agent.policy.params, pg, rng, eps, max_coords)

    def value_loss():
        v, _ = agent.value_forward(states)
        return value_weight * float(np.sum((target - v) ** 2))

    v, cache = agent.value_forward(states)
    vg = agent.value.backward(cache, (-2.0 * value_weight * (target - v))[:, None])
    val_err = _fd_check(value_loss, agent.value.params, vg, rng, eps, max_coords)
    return {"policy": pol_err, "value": val_err}


def run_gradchecks(seed: int = 0, ks=(2, 5), small_hidden: int = 6, full_hidden: int = 128,
                   full_coords: int = 40, tol: float = 1e-4) -> dict:
    """Finite-difference suite over both architectures.

    Small networks are checked on every parameter; full-width networks on a
    random subset of coordinates per tensor.
    """
    rng = np.random.default_rng(seed)
    rows = []
    for arch in ("one_pass", "scalable"):
        for k in ks:
            for label, hidden, coords in (("small", small_hidden, None), ("full", full_hidden, full_coords)):
                agent = ActorCritic.build(arch, k, hidden, rng)
                errs = gradcheck_agent(agent, k, rng, max_coords=coords)
                for net, err in errs.items():
                    rows.append({"architecture": arch, "num_ues": k, "size": label, "hidden": hidden,
                                 "network": net, "max_rel_error": float(err), "passed": bool(err < tol)})
    by_arch = {}
    for r in rows:
        by_arch[r["architecture"]] = max(by_arch.get(r["architecture"], 0.0), r["max_rel_error"])
    return {"tolerance": tol, "checks": rows, "max_rel_error": by_arch,
            "passed": all(r["passed"] for r in rows)}
