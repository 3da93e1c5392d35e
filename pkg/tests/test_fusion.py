import pytest
import torch

from bidirep import fusion as F
from bidirep import model as M
from bidirep.corpus import DocumentStore
from bidirep.tokenizer import train_bpe
from bidirep.training import ModelCheckpoint, TrainConfig, train_lm

CFG = dict(d_model=16, n_layers=2, n_heads=2, d_ff=32, max_seq_len=32,
           dropout_rate=0.0)


@pytest.fixture(scope="module")
def setup():
    text = "red green blue cyan plum gray " * 60
    vocab = train_bpe(text, vocab_size=278)
    store = DocumentStore(docs=(text.strip(),), order_seed=0)
    mcfg = M.ModelConfig(vocab_size=vocab.size, **CFG)
    tcfg = TrainConfig(batch_size=4, total_steps=40, base_lr=1e-3, eval_every=10, seed=0)
    fwd = train_lm("forward", store, vocab, mcfg, tcfg, seg_len=16)
    bwd = train_lm("backward", store, vocab, mcfg, tcfg, seg_len=16)
    return vocab, fwd, bwd


def _ids(vocab, text="red green blue cyan plum"):
    return vocab.encode(text)


def test_extract_forward_shape_and_provenance(setup):
    vocab, fwd, _ = setup
    r = F.extract_forward(fwd, [3])
    assert (r.rows, r.dim) == (1, 16)
    assert r.provenance == "forward"
    assert r.vocab_hash == vocab.hash


def test_extract_direction_mismatch(setup):
    _, fwd, bwd = setup
    with pytest.raises(ValueError, match="forward"):
        F.extract_forward(bwd, [1, 2])
    with pytest.raises(ValueError, match="backward"):
        F.extract_backward(fwd, [1, 2])


def test_forward_causality_last_position(setup):
    vocab, fwd, _ = setup
    ids = list(_ids(vocab).ids)
    a = F.extract_forward(fwd, ids)
    other = ids[:-1] + [(ids[-1] + 1) % vocab.size]
    b = F.extract_forward(fwd, other)
    assert torch.equal(a.values[:-1], b.values[:-1])


def test_forward_prefix_consistency(setup):
    vocab, fwd, _ = setup
    ids = list(_ids(vocab).ids)
    full = F.extract_forward(fwd, ids + list(_ids(vocab, " gray").ids))
    part = F.extract_forward(fwd, ids)
    assert torch.allclose(part.values, full.values[: len(ids)], atol=1e-6)


def test_backward_realignment_index_map(setup):
    vocab, _, bwd = setup
    ids = list(_ids(vocab).ids)[:5]
    aligned = F.extract_backward(bwd, ids)
    raw = M.final_norm(bwd.params, M.forward_hidden(bwd.params, ids[::-1], bwd.config))
    n = len(ids)
    for i in range(n):
        assert torch.equal(aligned.values[i], raw[n - 1 - i])


def test_backward_anticausality(setup):
    vocab, _, bwd = setup
    ids = list(_ids(vocab).ids)
    a = F.extract_backward(bwd, ids)
    other = [(ids[0] + 1) % vocab.size] + ids[1:]
    b = F.extract_backward(bwd, other)
    assert torch.equal(a.values[1:], b.values[1:])
    assert a.provenance == "backward-aligned"


def test_backward_equals_reversed_forward_extraction(setup):
    vocab, _, bwd = setup
    ids = list(_ids(vocab).ids)
    aligned = F.extract_backward(bwd, ids)
    hidden = M.forward_hidden(bwd.params, ids[::-1], bwd.config)
    recomputed = M.final_norm(bwd.params, hidden).flip(0)
    assert torch.equal(aligned.values, recomputed)


def test_concat_dims_and_slicing(setup):
    vocab, fwd, bwd = setup
    ids = list(_ids(vocab).ids)
    f = F.extract_forward(fwd, ids)
    b = F.extract_backward(bwd, ids)
    fused = F.concat_reps(f, b)
    assert fused.dim == f.dim + b.dim
    assert fused.provenance == "fused"
    assert torch.equal(fused.values[:, : f.dim], f.values)
    assert torch.equal(fused.values[:, f.dim :], b.values)


def test_concat_heterogeneous_dims_accepted(setup):
    f = F.RepMatrix(torch.zeros(3, 64), "forward", "h")
    b = F.RepMatrix(torch.zeros(3, 16), "backward-aligned", "h")
    assert F.concat_reps(f, b).dim == 80


def test_concat_row_mismatch(setup):
    f = F.RepMatrix(torch.zeros(3, 4), "forward", "h")
    b = F.RepMatrix(torch.zeros(2, 4), "backward-aligned", "h")
    with pytest.raises(ValueError, match="row mismatch"):
        F.concat_reps(f, b)


def test_concat_vocab_hash_mismatch():
    f = F.RepMatrix(torch.zeros(3, 4), "forward", "hash-a")
    b = F.RepMatrix(torch.zeros(3, 4), "backward-aligned", "hash-b")
    with pytest.raises(ValueError, match="vocabulary not shared"):
        F.concat_reps(f, b)


def test_concat_provenance_rules():
    f = F.RepMatrix(torch.zeros(3, 4), "forward", "h")
    b = F.RepMatrix(torch.zeros(3, 4), "backward-aligned", "h")
    with pytest.raises(ValueError, match="backward-aligned"):
        F.concat_reps(f, f)
    with pytest.raises(ValueError, match="forward/external"):
        F.concat_reps(b, b)
    ext = F.RepMatrix(torch.zeros(3, 4), "external", None)
    assert F.concat_reps(ext, b).provenance == "fused"


def test_fused_coverage_every_position_matters(setup):
    vocab, fwd, bwd = setup
    ids = [int(x) for x in torch.randint(0, vocab.size, (8,), generator=torch.Generator().manual_seed(0))]
    fused = F.concat_reps(F.extract_forward(fwd, ids), F.extract_backward(bwd, ids)).values
    for j in range(8):
        other = list(ids)
        other[j] = (other[j] + 1) % vocab.size
        fused2 = F.concat_reps(
            F.extract_forward(fwd, other), F.extract_backward(bwd, other)
        ).values
        for i in range(8):
            assert not torch.equal(fused[i], fused2[i]), (i, j)


def test_word_pool_first(setup):
    vocab, fwd, _ = setup
    enc = vocab.encode("red green blue")
    reps = F.extract_forward(fwd, enc.ids)
    pooled = F.word_pool(reps, enc)
    assert pooled.rows == 3
    # independent gather oracle
    for w, start in enumerate(enc.word_starts):
        assert torch.equal(pooled.values[w], reps.values[start])


def test_word_pool_single_subword_identity(setup):
    vocab, fwd, _ = setup
    enc = vocab.encode("red green")
    if len(enc.ids) == len(enc.word_starts):  # every word one subword
        reps = F.extract_forward(fwd, enc.ids)
        pooled = F.word_pool(reps, enc)
        assert torch.equal(pooled.values, reps.values)


def test_word_pool_mean(setup):
    vocab, fwd, _ = setup
    enc = vocab.encode("red green blue")
    reps = F.extract_forward(fwd, enc.ids)
    pooled = F.word_pool(reps, enc, mode="mean")
    starts = list(enc.word_starts) + [len(enc.ids)]
    for w in range(3):
        expect = reps.values[starts[w] : starts[w + 1]].mean(dim=0)
        assert torch.allclose(pooled.values[w], expect)


def test_word_pool_row_count_check(setup):
    vocab, fwd, _ = setup
    enc = vocab.encode("red green blue")
    reps = F.extract_forward(fwd, list(enc.ids) + [0])
    with pytest.raises(ValueError, match="token count"):
        F.word_pool(reps, enc)


def test_reps_dump_roundtrip_bit_exact(setup, tmp_path):
    vocab, fwd, _ = setup
    reps = F.extract_forward(fwd, list(_ids(vocab).ids))
    path = tmp_path / "f.reps"
    F.dump_reps(reps, path)
    loaded = F.load_external_reps(path)
    assert loaded.provenance == "external"
    assert torch.equal(loaded.values, reps.values)
    header = path.read_bytes().split(b"\n", 1)[0]
    assert header == f"REPS v1 {reps.rows} {reps.dim}".encode()


def test_reps_load_rejects_bad_header(tmp_path):
    path = tmp_path / "bad.reps"
    path.write_bytes(b"NOPE v9 3 4\n" + b"\x00" * 48)
    with pytest.raises(ValueError, match="not a representation dump"):
        F.load_external_reps(path)


def test_reps_load_rejects_nan(tmp_path):
    import numpy as np

    path = tmp_path / "nan.reps"
    arr = np.full((2, 3), np.nan, dtype="<f4")
    path.write_bytes(b"REPS v1 2 3\n" + arr.tobytes())
    with pytest.raises(ValueError, match="non-finite representation"):
        F.load_external_reps(path)


def test_reps_load_rejects_truncated(tmp_path):
    path = tmp_path / "short.reps"
    path.write_bytes(b"REPS v1 2 3\n" + b"\x00" * 10)
    with pytest.raises(ValueError, match="size mismatch"):
        F.load_external_reps(path)


def test_repmatrix_rejects_nonfinite():
    with pytest.raises(ValueError, match="non-finite"):
        F.RepMatrix(torch.tensor([[float("nan"), 1.0]]), "forward", None)
