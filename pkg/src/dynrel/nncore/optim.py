"""Adam with decoupled weight decay."""

import numpy as np


class Adam:
    """Standard Adam on a {name: Tensor} parameter dict.

    Weight decay is decoupled (applied directly to the weights, not
    mixed into the gradient), and skipped for biases and other 1-d
    parameters.
    """

    def __init__(self, params, lr=5e-4, betas=(0.9, 0.999), eps=1e-8,
                 weight_decay=0.0):
        self.params = dict(params)
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.step_count = 0
        self.m = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in self.params.items()}

    def step(self):
        self.step_count += 1
        t = self.step_count
        bc1 = 1.0 - self.beta1 ** t
        bc2 = 1.0 - self.beta2 ** t
        for name, p in self.params.items():
            g = p.grad
            if g is None:
                continue
            m = self.m[name]
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            if self.weight_decay and p.data.ndim > 1:
                p.data -= (self.lr * self.weight_decay) * p.data
            p.data -= (self.lr / bc1) * m / (np.sqrt(v / bc2) + self.eps)

    def zero_grad(self):
        for p in self.params.values():
            p.zero_grad()

    def state_arrays(self):
        out = {"step_count": np.asarray(self.step_count, dtype=np.int64)}
        for name, arr in self.m.items():
            out[f"m.{name}"] = arr
        for name, arr in self.v.items():
            out[f"v.{name}"] = arr
        return out

    def load_state_arrays(self, arrays):
        self.step_count = int(arrays["step_count"])
        for name in self.m:
            self.m[name] = np.asarray(arrays[f"m.{name}"]).copy()
            self.v[name] = np.asarray(arrays[f"v.{name}"]).copy()
