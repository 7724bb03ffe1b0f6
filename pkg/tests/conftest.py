import numpy as np
import pytest

from seqdit import tensor as tk


def finite_difference(fn, arrays, h=1e-5):
    """Central finite-difference gradients of scalar fn(*arrays).

    Independent oracle: evaluates fn twice per coordinate in float64 and
    never touches the autodiff tape.
    """
    grads = []
    for i, a in enumerate(arrays):
        a = a.astype(np.float64)
        g = np.zeros_like(a)
        flat = a.reshape(-1)
        gflat = g.reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + h
            plus = fn(*[x if k != i else a for k, x in enumerate(arrays)])
            flat[j] = orig - h
            minus = fn(*[x if k != i else a for k, x in enumerate(arrays)])
            flat[j] = orig
            gflat[j] = (plus - minus) / (2 * h)
        grads.append(g)
    return grads


def analytic_grads(fn, arrays):
    """Autodiff gradients of scalar fn over Tensor-wrapped float64 arrays."""
    tensors = [tk.Tensor(a.astype(np.float64), requires_grad=True)
               for a in arrays]
    with tk.tape() as tp:
        loss = fn(*tensors)
        tk.backward(loss, tp)
    return [t.grad for t in tensors]


def max_rel_err(analytic, numeric, floor=1e-6):
    denom = np.maximum(np.abs(numeric), floor)
    return float(np.max(np.abs(analytic - numeric) / denom))


@pytest.fixture(scope="session")
def tiny_corpus(tmp_path_factory):
    """Small on-disk corpus shared by CLI/training tests."""
    from seqdit import data
    out = tmp_path_factory.mktemp("corpus")
    records = data.gen_dataset(n_train=4, n_test=2, clip_len=4, h=16, w=16,
                               master_seed=7, n_identities=2)
    data.write_dataset(records, str(out), {"master_seed": 7})
    return str(out)


def tiny_config(corpus, **overrides):
    from seqdit import config as config_mod
    cfg = config_mod.RunConfig()
    cfg.data.corpus = corpus
    cfg.data.clip_len = 4
    cfg.data.height = 16
    cfg.data.width = 16
    cfg.model.dim = 32
    cfg.model.n_heads = 2
    cfg.model.head_dim = 16
    cfg.model.n_layers = 2
    cfg.model.lora_rank = 4
    cfg.model.lora_alpha = 4.0
    cfg.diffusion.schedule_steps = 50
    cfg.diffusion.inference_steps = 10
    cfg.optimizer.max_steps = 6
    for key, val in overrides.items():
        obj = cfg
        *path, last = key.split(".")
        for part in path:
            obj = getattr(obj, part)
        setattr(obj, last, val)
    return cfg.validate()
