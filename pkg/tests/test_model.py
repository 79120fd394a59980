from dataclasses import replace

import pytest
import torch

from src.domain.encoding import TokenRole
from src.domain.models import (
    BiasScheme,
    EmbeddingScheme,
    FactorConfig,
    FactorConfigError,
    MaskScheme,
    PositionRangeError,
    PositionScheme,
    Table,
    TokenScheme,
)
from src.use_cases.linearize import encode
from src.use_cases.model import ModelConfig, build_model, prepare, prepare_example
from src.use_cases.vocabulary import BOS, VOCAB

QUESTION = "select c1 where c2 = 4"


def _config(**factor) -> ModelConfig:
    return ModelConfig(d_model=16, n_heads=2, n_enc_layers=1, n_dec_layers=1, ffn_dim=32, max_answer_length=8,
                       factor=FactorConfig(**factor))


@pytest.fixture
def table() -> Table:
    return Table.from_lists(["c1", "c2"], [["1", "4"], ["2", "5"], ["3", "4"]])


def test_shapes(table):
    cfg = _config(tokens=TokenScheme.T2, mask=MaskScheme.M4, bias=BiasScheme.B1, emb=EmbeddingScheme.E1)
    model = build_model(cfg, seed=0)
    prep = prepare_example(QUESTION, table, cfg)
    assert model.encode(prep).shape == (len(prep), cfg.d_model)
    targets = torch.tensor([[VOCAB.id(BOS), 5, 6]])
    assert model([prep], targets).shape == (1, 3, cfg.vocab_size)


def test_mask_changes_encoder_output(table):
    states = []
    for mask in (MaskScheme.M0, MaskScheme.M1):
        cfg = _config(mask=mask)
        model = build_model(cfg, seed=3)
        with torch.no_grad():
            states.append(model.encode(prepare_example(QUESTION, table, cfg)))
    assert not torch.allclose(states[0], states[1], atol=1e-4)


def test_row_permutation_equivariance(table):
    # CPE and M1 leave nothing that depends on where a row sits in the sequence.
    cfg = _config(mask=MaskScheme.M1, pe=PositionScheme.CPE)
    model = build_model(cfg, seed=1)
    swapped = Table(table.headers, (table.rows[2], table.rows[1], table.rows[0]))
    perm = {0: 0, 1: 3, 2: 2, 3: 1}
    prep_a = prepare_example(QUESTION, table, cfg)
    prep_b = prepare_example(QUESTION, swapped, cfg)
    with torch.no_grad():
        a, b = model.encode(prep_a), model.encode(prep_b)

    enc_a, enc_b = prep_a.enc, prep_b.enc
    where_b = {(int(enc_b.row_idx[i]), int(enc_b.col_idx[i]), int(enc_b.cell_ord[i])): i
               for i in range(len(enc_b)) if enc_b.roles[i] == TokenRole.CELL_CONTENT}
    for i in range(len(enc_a)):
        if enc_a.roles[i] == TokenRole.CELL_CONTENT:
            j = where_b[(perm[int(enc_a.row_idx[i])], int(enc_a.col_idx[i]), int(enc_a.cell_ord[i]))]
            assert torch.allclose(a[i], b[j], atol=1e-5)
        elif enc_a.roles[i] == TokenRole.QUESTION:
            assert torch.allclose(a[i], b[i], atol=1e-5)


@pytest.mark.parametrize("factor", [
    {"mask": MaskScheme.M3},
    {"tokens": TokenScheme.T2, "mask": MaskScheme.M6, "bias": BiasScheme.B1},
])
def test_kernels_agree_forward_and_backward(table, factor):
    outputs, grads = [], []
    for kernel in ("dense", "block_sparse"):
        cfg = replace(_config(**factor), kernel=kernel, check_tiling=True)
        model = build_model(cfg, seed=2)
        prep = prepare_example(QUESTION, table, cfg)
        out = model.encode(prep)
        out.square().sum().backward()
        outputs.append(out.detach())
        grads.append(model.encoder_layers[0].attn.qkv.weight.grad.clone())
    assert torch.allclose(outputs[0], outputs[1], atol=1e-5)
    assert torch.allclose(grads[0], grads[1], atol=1e-4)


def test_position_range(table):
    cfg = ModelConfig(d_model=16, n_heads=2, context_length=8, max_positions=8)
    enc = encode(QUESTION, table, TokenScheme.T0, PositionScheme.TPE, max_length=512)
    with pytest.raises(PositionRangeError):
        prepare(enc, cfg)


def test_row_range_under_e1(table):
    cfg = _config(emb=EmbeddingScheme.E1)
    cfg = ModelConfig.from_dict({**cfg.to_dict(), "max_rows": 2})
    with pytest.raises(PositionRangeError):
        prepare_example(QUESTION, table, cfg)


def test_encoding_must_match_factor(table):
    enc = encode(QUESTION, table, TokenScheme.T1, PositionScheme.TPE)
    with pytest.raises(FactorConfigError):
        prepare(enc, _config())


def test_greedy_decode_starts_with_bos(table):
    cfg = _config()
    model = build_model(cfg, seed=0)
    (ids,) = model.greedy_decode([prepare_example(QUESTION, table, cfg)])
    assert ids[0] == VOCAB.id(BOS)
    assert len(ids) <= cfg.max_answer_length


class TestModelConfig:
    def test_dict_round_trip(self):
        cfg = _config(tokens=TokenScheme.T2, mask=MaskScheme.M5)
        assert ModelConfig.from_dict(cfg.to_dict()) == cfg

    def test_unknown_key(self):
        with pytest.raises(FactorConfigError):
            ModelConfig.from_dict({"d_model": 16, "n_heads": 2, "width": 3})

    def test_heads_must_divide_width(self):
        with pytest.raises(FactorConfigError):
            ModelConfig(d_model=10, n_heads=4)

    def test_state_arrays_round_trip(self):
        cfg = _config(bias=BiasScheme.B1)
        source, target = build_model(cfg, seed=0), build_model(cfg, seed=1)
        target.load_arrays(source.state_arrays())
        for name, value in source.state_dict().items():
            assert torch.equal(value, target.state_dict()[name])
