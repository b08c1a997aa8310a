import numpy as np
import pytest

from fairlm import corpus as cp
from fairlm import model as lm


@pytest.fixture
def small_vocab():
    words = ["she", "he", "woman", "man", "is", "a", "doctor", "nurse",
             "the", "math", ".", "king", "tired"]
    return cp.Vocabulary(list(cp.RESERVED_TOKENS) + words)


@pytest.fixture
def small_lexicon(small_vocab):
    return cp.lexicon_from_pairs([("she", "he"), ("woman", "man")], small_vocab)


def zero_params(hyper: lm.ModelHyper, vocab_size: int) -> lm.ModelParams:
    """All-zero weights: logits are identically zero, softmax uniform."""
    d, h = hyper.embed_dim, hyper.hidden_units
    layers = []
    for i in range(hyper.num_layers):
        in_dim = d if i == 0 else h
        layers.append(lm.LayerParams(w_x=np.zeros((in_dim, 4 * h)),
                                     w_h=np.zeros((h, 4 * h)),
                                     b=np.zeros(4 * h)))
    return lm.ModelParams(embedding=np.zeros((vocab_size, d)), layers=layers,
                          w_out=np.zeros((h, vocab_size)), b_out=np.zeros(vocab_size))


def finite_difference(loss_fn, params: lm.ModelParams, step: float = 1e-5):
    """Central finite differences of loss_fn over every parameter element."""
    grads = {}
    for name, tensor in lm.named_tensors(params):
        fd = np.zeros_like(tensor)
        it = np.nditer(tensor, flags=["multi_index"])
        for _ in it:
            idx = it.multi_index
            orig = tensor[idx]
            tensor[idx] = orig + step
            plus = loss_fn(params)
            tensor[idx] = orig - step
            minus = loss_fn(params)
            tensor[idx] = orig
            fd[idx] = (plus - minus) / (2.0 * step)
        grads[name] = fd
    return grads


def relative_error(a: np.ndarray, b: np.ndarray) -> float:
    denom = max(float(np.linalg.norm(a)), float(np.linalg.norm(b)), 1e-12)
    return float(np.linalg.norm(a - b)) / denom
