import numpy as np
import pytest

from lexgen.autodiff import Tape
from lexgen.data import Vocab, synth_fixture
from lexgen.training import collate, encode_entries
from lexgen.transformer import ModelConfig, Transformer

# criterion number -> one-line PASS/FAIL report, filled by test_acceptance.py
ACCEPTANCE: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        terminalreporter.write_line(ACCEPTANCE[n])


def fd_check(loss_fn, params: dict, rng, n_coords: int = 20, h: float = 1e-5):
    """Central-difference check of the gradients of ``loss_fn()`` w.r.t. ``params``.

    Returns ``{name: relative error}`` measured on a random subset of
    coordinates per tensor as ||a - n|| / max(||a||, ||n||, 1e-6).
    """
    for t in params.values():
        t.zero_grad()
    loss = loss_fn()
    Tape.from_output(loss).backward(loss)
    errors = {}
    for name, t in params.items():
        flat = t.data.reshape(-1)
        k = min(n_coords, flat.size)
        coords = rng.choice(flat.size, size=k, replace=False)
        analytic = t.grad.reshape(-1)[coords].copy()
        numeric = np.empty(k)
        for j, c in enumerate(coords):
            old = flat[c]
            flat[c] = old + h
            up = float(loss_fn().data)
            flat[c] = old - h
            down = float(loss_fn().data)
            flat[c] = old
            numeric[j] = (up - down) / (2 * h)
        denom = max(np.linalg.norm(analytic), np.linalg.norm(numeric), 1e-6)
        errors[name] = float(np.linalg.norm(analytic - numeric) / denom)
    return errors


def tiny_model(position: str = "after_san", d: int = 8, vocab_size: int = 12, seed: int = 0, dtype="float64", **kw):
    cfg = ModelConfig.toy(
        d_model=d, n_heads=2, d_ff=16, d_gate_hidden=4, vocab_size=vocab_size,
        dr_position=position, dtype=dtype, dropout_p=0.0, **kw,
    )
    return Transformer.init(cfg, seed)


def randomize_routing(model: Transformer, rng) -> None:
    """Move the routing weights away from their symmetric init so every gradient is non-trivial."""
    dr = model.dr
    if dr is None:
        return
    for name, t in dr.named_tensors().items():
        t.data = (t.data + rng.normal(0, 0.5, t.shape)).astype(t.data.dtype)


@pytest.fixture(scope="session")
def synth_small():
    entries = synth_fixture(0)
    return entries, Vocab.build(entries)


@pytest.fixture
def toy_batch(synth_small):
    entries, vocab = synth_small
    ex = encode_entries(entries[:6], vocab, max_len=32)
    return collate(ex), vocab
