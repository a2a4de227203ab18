"""Label-conditional masked generator, two-headed critic, and the DGM losses."""
from contextlib import contextmanager

import numpy as np

from . import expansion as X
from . import masks as M
from . import tensor as T
from .layers import LayerSlot, glorot_uniform, np_activation
from .optim import Adam


def one_hot(labels, n_classes, dtype=np.float64):
    labels = np.asarray(labels, dtype=np.int64)
    out = np.zeros((labels.size, n_classes), dtype=dtype)
    out[np.arange(labels.size), labels] = 1.0
    return out


@contextmanager
def frozen(params):
    """Temporarily exclude parameters from graph recording."""
    saved = [p.requires_grad for p in params]
    for p in params:
        p.requires_grad = False
    try:
        yield
    finally:
        for p, flag in zip(params, saved):
            p.requires_grad = flag


class Generator:
    """Conditional generator ``G(z, y)`` with masked hidden layers.

    Labels are one-hot encoded and concatenated with the noise. Each task owns
    an unmasked output head, trained only while that task is learned; hidden
    layers are shared and protected by the masks.
    """

    def __init__(self, z_dim, n_classes, hidden, out_dim, variant, rng,
                 out_activation="tanh", dtype=np.float64):
        self.z_dim = z_dim
        self.n_classes = n_classes
        self.out_dim = out_dim
        self.variant = M.check_variant(variant)
        self.out_activation = out_activation
        self.dtype = dtype
        widths = [z_dim + n_classes] + list(hidden)
        self.layers = [LayerSlot(widths[i], widths[i + 1], variant, rng, name=f"g{i}", dtype=dtype)
                       for i in range(len(hidden))]
        self.heads = {}
        self.task_labels = {}
        self.current_task = None

    # -------------------------------------------------------------- bookkeeping

    def size(self):
        return sum(layer.capacity_size() for layer in self.layers)

    def free(self):
        return sum(layer.free_capacity() for layer in self.layers)

    def widths(self):
        return [layer.p for layer in self.layers]

    def begin_task(self, task, labels, rng):
        self.current_task = task
        self.task_labels[task] = [int(y) for y in labels]
        for layer in self.layers:
            layer.begin_task(task)
        p = self.layers[-1].p
        self.heads[task] = (T.Parameter(glorot_uniform(rng, p, self.out_dim, self.dtype), name=f"head{task}.W"),
                            T.Parameter(np.zeros(self.out_dim, dtype=self.dtype), name=f"head{task}.b"))

    def parameters(self):
        """Parameters trained while learning the current task."""
        out = []
        for layer in self.layers:
            out += layer.parameters()
        out += list(self.heads[self.current_task])
        return out

    def mask_parameters(self):
        out = []
        for layer in self.layers:
            out += layer.mask_parameters()
        return out

    def set_gates(self, s, use_current=True):
        for layer in self.layers:
            layer.set_gates(s, use_current)

    def clear_gates(self):
        for layer in self.layers:
            layer.W.gate = None
            layer.b.gate = None

    # -------------------------------------------------------------- forward passes

    def condition(self, z, labels):
        return np.concatenate([z, one_hot(labels, self.n_classes, self.dtype)], axis=1)

    def forward(self, z, labels, s):
        """Differentiable pass for the current task; also returns the soft
        masks used so the sparsity penalty can share them."""
        h = T.Tensor(self.condition(z, labels))
        soft = []
        for layer in self.layers:
            m, mb = layer.soft_masks(s)
            if layer.variant == "a":
                h = M.apply_mask(h, layer.W, layer.b, m, "a", layer.activation)
                soft.append(m)
            else:
                h = M.apply_mask(h, layer.W, layer.b, m, "w", layer.activation,
                                 m_bias=T.reshape(mb, (layer.p,)))
                soft += [m, mb]
        W, b = self.heads[self.current_task]
        out = T.ACTIVATIONS[self.out_activation](T.dense(h, W, b))
        return out, soft

    def frozen_forward(self, z, labels, task):
        """Replay pass under the binary snapshot of a finished task."""
        if task not in self.heads or any(task not in layer.snapshots for layer in self.layers):
            raise KeyError(f"no stored mask snapshot for task {task}")
        h = self.condition(z, labels)
        idx = np.arange(h.shape[1])
        for layer in self.layers:
            h, idx = layer.frozen_forward(h, idx, task)
        W, b = self.heads[task]
        return np_activation(self.out_activation, h @ W.data[idx] + b.data)

    def sample(self, task, count, rng, labels=None):
        """``count`` samples of a finished task, labels uniform over the
        task's classes unless given."""
        if task not in self.task_labels:
            raise KeyError(f"unknown task {task}")
        allowed = self.task_labels[task]
        if labels is None:
            labels = rng.choice(np.asarray(allowed), size=count)
        else:
            labels = np.asarray(labels, dtype=np.int64)
            bad = set(labels.tolist()) - set(allowed)
            if bad:
                raise ValueError(f"labels {sorted(bad)} do not belong to task {task}")
            count = labels.size
        if count == 0:
            return np.zeros((0, self.out_dim), dtype=self.dtype), np.zeros(0, dtype=np.int64)
        z = rng.standard_normal((count, self.z_dim)).astype(self.dtype)
        return self.frozen_forward(z, labels, task), labels

    # -------------------------------------------------------------- end of task

    def end_task(self, task, rng, expand=True):
        """Reserve the learned masks, then grow every layer (if enabled).

        Returns one ``(layer, delta, added)`` record per hidden layer."""
        records = []
        deltas = [layer.reserve(task) for layer in self.layers]
        for i, (layer, delta) in enumerate(zip(self.layers, deltas)):
            consumer = self.layers[i + 1] if i + 1 < len(self.layers) else None
            if expand:
                added = X.expand(layer, delta, rng, consumer=consumer, task=task)
            else:
                added = 0
                layer.growth_log.append((task, delta, 0))
            if consumer is None and added:
                for W, _ in self.heads.values():
                    W.data = np.concatenate([W.data, np.zeros((added, self.out_dim), dtype=self.dtype)])
            records.append((i, delta, added))
        self.current_task = None
        return records


class Discriminator:
    """Shared LeakyReLU trunk with a linear critic head and a class head.

    The class head has one logit per class seen so far and grows per task."""

    def __init__(self, in_dim, hidden, rng, dtype=np.float64):
        widths = [in_dim] + list(hidden)
        self.dtype = dtype
        self.trunk = []
        for i in range(len(hidden)):
            self.trunk.append((T.Parameter(glorot_uniform(rng, widths[i], widths[i + 1], dtype), name=f"d{i}.W"),
                               T.Parameter(np.zeros(widths[i + 1], dtype=dtype), name=f"d{i}.b")))
        h = widths[-1]
        self.adv_W = T.Parameter(glorot_uniform(rng, h, 1, dtype), name="adv.W")
        self.adv_b = T.Parameter(np.zeros(1, dtype=dtype), name="adv.b")
        self.aux_W = T.Parameter(np.zeros((h, 0), dtype=dtype), name="aux.W")
        self.aux_b = T.Parameter(np.zeros(0, dtype=dtype), name="aux.b")

    @property
    def n_classes(self):
        return self.aux_W.data.shape[1]

    def parameters(self):
        out = []
        for W, b in self.trunk:
            out += [W, b]
        return out + [self.adv_W, self.adv_b, self.aux_W, self.aux_b]

    def grow_classes(self, k, rng):
        """Append ``k`` class logits; existing logits are untouched."""
        h = self.aux_W.data.shape[0]
        new = glorot_uniform(rng, h, k, self.dtype)
        self.aux_W.data = np.ascontiguousarray(np.concatenate([self.aux_W.data, new], axis=1))
        self.aux_b.data = np.concatenate([self.aux_b.data, np.zeros(k, dtype=self.dtype)])

    def features(self, x):
        h = T.as_tensor(x)
        for W, b in self.trunk:
            h = T.leaky_relu(T.dense(h, W, b))
        return h

    def __call__(self, x):
        """Critic scores (batch,) and class logits (batch, classes)."""
        h = self.features(x)
        adv = T.reshape(T.dense(h, self.adv_W, self.adv_b), (h.shape[0],))
        if self.n_classes == 0:
            return adv, None
        return adv, T.dense(h, self.aux_W, self.aux_b)

    def critic(self, x):
        return self(x)[0]

    def predict(self, x):
        with T.no_grad():
            _, logits = self(T.Tensor(x))
        return np.argmax(logits.data, axis=1)


# ---------------------------------------------------------------- losses

def gradient_penalty(disc, x_real, x_fake, rng, point="interpolate"):
    """Mean squared deviation of the critic's input-gradient norm from 1."""
    x_real = np.asarray(x_real)
    x_fake = np.asarray(x_fake)
    if x_real.shape != x_fake.shape:
        raise ValueError(f"real batch {x_real.shape} and fake batch {x_fake.shape} differ in shape")
    if point == "interpolate":
        eps = rng.uniform(size=(x_real.shape[0], 1)).astype(x_real.dtype)
        xh = eps * x_real + (1.0 - eps) * x_fake
    elif point == "fake":
        xh = x_fake
    else:
        raise ValueError(f"unknown gradient-penalty point {point!r}")
    xh = T.Tensor(xh, requires_grad=True)
    # samples are independent, so the gradient of the sum is per-sample
    norms = T.input_gradient_norm(T.tsum(disc.critic(xh)), xh, create_graph=True)
    return T.mean(T.square(T.sub(norms, 1.0)))


def generator_loss(disc, x_fake, labels, soft_masks, cum_masks, alpha, lambda_ru):
    """Generator objective and its parts.

    The critic term is ``-E[D(G)]``. The class term follows the written form
    ``L_G = L_s - L_c`` with ``L_c = E[y log p(y | G)]`` (a log-likelihood,
    i.e. minus the cross entropy), so subtracting it adds the cross entropy
    and rewards fakes the class head recognises.
    """
    adv, logits = disc(x_fake)
    ls = T.neg(T.mean(adv))
    ce = T.cross_entropy(logits, labels)
    lc = T.neg(ce)
    reg = M.regularizer(soft_masks, cum_masks)
    reg = reg if isinstance(reg, T.Tensor) else T.Tensor(reg)
    total = T.add(T.sub(ls, lc), T.mul(reg, alpha * lambda_ru))
    parts = {"L_G": total.item(), "Ls_G": ls.item(), "Lc_G": lc.item(), "R": reg.item()}
    return total, parts


def discriminator_loss(disc, x_real, y_real, x_fake, replay, task, lambda_gp, rng, gp_point="interpolate"):
    """Critic/classifier objective and its parts.

    ``replay`` is a list of ``(task_j, x_j, y_j)`` generated batches; every
    ``task_j`` must precede ``task``. Each replayed task adds its own mean
    cross entropy.
    """
    for j, _, _ in replay:
        if j >= task:
            raise ValueError(f"replay batch from task {j} is not earlier than current task {task}")
    # one critic pass over real, fake and replay rows, then sliced per batch
    batches = [np.asarray(x_real), np.asarray(x_fake)] + [xj for _, xj, yj in replay if len(yj)]
    bounds = np.cumsum([0] + [len(b) for b in batches])
    adv, logits = disc(T.Tensor(np.concatenate(batches)))
    rows = [slice(int(a), int(b)) for a, b in zip(bounds[:-1], bounds[1:])]
    adv_r, adv_f = T.take(adv, rows[0], axis=0), T.take(adv, rows[1], axis=0)
    ls = T.add(T.neg(T.mean(adv_r)), T.mean(adv_f))
    lc = T.cross_entropy(T.take(logits, rows[0], axis=0), y_real)
    replay_total = 0.0
    labels = [yj for _, _, yj in replay if len(yj)]
    for sl, yj in zip(rows[2:], labels):
        term = T.cross_entropy(T.take(logits, sl, axis=0), yj)
        replay_total += term.item()
        lc = T.add(lc, term)
    if lambda_gp:
        gp = gradient_penalty(disc, x_real, x_fake, rng, gp_point)
        total = T.add(T.add(ls, lc), T.mul(gp, lambda_gp))
        gp_val = gp.item()
    else:
        total = T.add(ls, lc)
        gp_val = 0.0
    parts = {"L_D": total.item(), "Ls_D": ls.item(), "Lc_D": lc.item(), "L_gp": gp_val,
             "replay": replay_total}
    return total, parts


# ---------------------------------------------------------------- training unit

class GenerativeMemory:
    """Generator, critic and their optimizers, trained one task at a time."""

    def __init__(self, gen, disc, rng, *, lr_g=2e-4, lr_d=2e-4, betas=(0.5, 0.999),
                 n_critic=5, lambda_gp=10.0, lambda_ru=2.0, gp_point="interpolate",
                 batch_size=64, replay_batch=None, grad_clamp=50.0, gate_current=True, lr_embedding=None):
        self.gen = gen
        self.disc = disc
        self.rng = rng
        self.lr_g, self.lr_d, self.betas = lr_g, lr_d, betas
        self.n_critic = n_critic
        self.lambda_gp = lambda_gp
        self.lambda_ru = lambda_ru
        self.gp_point = gp_point
        self.batch_size = batch_size
        self.replay_batch = replay_batch or batch_size
        self.grad_clamp = grad_clamp
        self.gate_current = gate_current
        self.lr_embedding = lr_embedding or lr_g
        self.opt_d = Adam(disc.parameters(), lr=lr_d, betas=betas)
        self.opt_g = self.opt_e = None
        self.task = None
        self.alpha = 1.0
        self.d_updates = 0
        self.g_updates = 0
        self.finished = []

    def begin_task(self, task, labels):
        labels = sorted(int(y) for y in labels)
        self.task = task
        self.labels = labels
        need = max(labels) + 1 - self.disc.n_classes
        if need > 0:
            self.disc.grow_classes(need, self.rng)
        self.alpha = M.capacity_ratio(self.gen.size(), self.gen.free())
        self.gen.begin_task(task, labels, self.rng)
        self.opt_g = Adam(self.gen.parameters(), lr=self.lr_g, betas=self.betas)
        self.opt_e = Adam(self.gen.mask_parameters(), lr=self.lr_embedding, betas=self.betas)

    def replay_batches(self, count=None):
        count = self.replay_batch if count is None else count
        out = []
        for j in self.finished:
            x, y = self.gen.sample(j, count, self.rng)
            out.append((j, x, y))
        return out

    def noise(self, count):
        z = self.rng.standard_normal((count, self.gen.z_dim)).astype(self.gen.dtype)
        y = self.rng.choice(np.asarray(self.labels), size=count)
        return z, y

    def d_step(self, x_real, y_real, s, replay=True):
        z, y = self.noise(x_real.shape[0])
        with T.no_grad():
            x_fake = self.gen.forward(z, y, s)[0].data
        batches = self.replay_batches() if replay else []
        loss, parts = discriminator_loss(self.disc, x_real, y_real, x_fake, batches, self.task,
                                         self.lambda_gp, self.rng, self.gp_point)
        T.backward(loss, self.disc.parameters())
        self.opt_d.step()
        self.d_updates += 1
        return parts

    def g_step(self, s):
        z, y = self.noise(self.batch_size)
        self.gen.set_gates(s, self.gate_current)
        with frozen(self.disc.parameters()):
            x_fake, soft = self.gen.forward(z, y, s)
            cum = []
            for layer in self.gen.layers:
                cum.append(layer.cum)
                if layer.variant == "w":
                    cum.append(layer.cum_bias[None, :])
            loss, parts = generator_loss(self.disc, x_fake, y, soft, cum, self.alpha, self.lambda_ru)
            params = self.gen.parameters() + self.gen.mask_parameters()
            T.backward(loss, params)
        for e in self.gen.mask_parameters():
            e.grad = M.clamp_gradient(e.grad, self.grad_clamp)
        self.opt_g.step()
        self.opt_e.step()
        self.gen.clear_gates()
        self.g_updates += 1
        return parts

    def alternate_step(self, real_sampler, s, replay=True):
        """``n_critic`` critic updates followed by one generator update."""
        d_parts = None
        for _ in range(self.n_critic):
            x_real, y_real = real_sampler()
            d_parts = self.d_step(x_real, y_real, s, replay)
        g_parts = self.g_step(s)
        out = dict(d_parts)
        out.update(g_parts)
        out["alpha"] = self.alpha
        out["s"] = s
        return out

    def end_task(self, expand=True):
        records = self.gen.end_task(self.task, self.rng, expand=expand)
        self.finished.append(self.task)
        self.task = None
        self.opt_g = self.opt_e = None
        return records
