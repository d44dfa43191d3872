import numpy as np
import pytest
import torch

from toyhoi import archive, rng
from toyhoi.attention_lora import FreezePolicy, inject_adapters, detach_adapters
from toyhoi.backbone import (CONCEPT_TOKENS, ConceptClue, Denoiser, DenoiserConfig, NumericError,
                             Vocabulary, VocabularyError, base_checksum, encode_prompt, load_base,
                             predict_noise, save_base, timestep_features)


@pytest.fixture
def vocab():
    return Vocabulary()


def _clue(vocab, label="subject", token="<s*>", value=0.0):
    mask = np.zeros((32, 32), bool)
    mask[3:5, 3:5] = True
    emb = torch.nn.Parameter(torch.full((32,), value))
    return ConceptClue(label, token, vocab.concept_ids[token], emb, mask)


def test_config_invariants():
    with pytest.raises(ValueError):
        DenoiserConfig(map_res=5)
    with pytest.raises(ValueError):
        DenoiserConfig(reserved_concept_slots=2)


def test_concept_ids_are_reserved_and_unique(vocab):
    ids = [vocab.concept_ids[t] for t in CONCEPT_TOKENS]
    assert len(set(ids)) == len(ids)
    assert all(i >= DenoiserConfig().vocab_size for i in ids)
    assert vocab.size <= DenoiserConfig().vocab_size


def test_plain_prompt_rows_equal_table(vocab, tiny_model):
    seq = vocab.tokenize("a photo of man ride horse at grass")
    out = encode_prompt(seq, tiny_model.text)
    assert torch.equal(out, tiny_model.text.weight[torch.tensor(seq.tokens)])


def test_concept_row_aliases_live_embedding(vocab, tiny_model):
    clue = _clue(vocab)
    seq = vocab.tokenize("a photo of <s*>")
    assert seq.concept_positions == {"<s*>": 3}
    assert torch.equal(encode_prompt(seq, tiny_model.text, [clue])[3], clue.embedding.detach())
    with torch.no_grad():
        clue.embedding.add_(1.0)
    assert torch.equal(encode_prompt(seq, tiny_model.text, [clue])[3], clue.embedding.detach())


def test_concept_rows_carry_gradient(vocab, tiny_model):
    clue = _clue(vocab, value=0.3)
    out = encode_prompt(vocab.tokenize("a photo of <s*>"), tiny_model.text, [clue])
    out.sum().backward()
    assert torch.equal(clue.embedding.grad, torch.ones(32))


def test_two_concept_prompt_positions(vocab):
    seq = vocab.tokenize("a photo of <s*> and <bg*>")
    assert len(seq.concept_positions) == 2


def test_unknown_concept_is_lookup_error(vocab, tiny_model):
    with pytest.raises(VocabularyError):
        encode_prompt(vocab.tokenize("a photo of <o*>"), tiny_model.text, [_clue(vocab)])


def test_unknown_word_lists_vocabulary(vocab):
    with pytest.raises(VocabularyError, match="ride"):
        vocab.tokenize("a photo of man juggle horse")


def test_interaction_placeholder_and_padding(vocab):
    seq = vocab.tokenize("a photo of <s*> {i} <o*>", interaction="Lie on")
    assert vocab.decode(seq) == "a photo of <s*> lie_on <o*>"
    assert len(seq.tokens) == DenoiserConfig().context_len


def test_repeated_concept_rejected(vocab):
    with pytest.raises(ValueError):
        vocab.tokenize("a photo of <s*> and <s*>")


def test_clue_mask_must_be_binary_and_nonempty(vocab):
    with pytest.raises(ValueError):
        ConceptClue("subject", "<s*>", vocab.concept_ids["<s*>"], torch.zeros(32), np.zeros((32, 32)))
    with pytest.raises(ValueError):
        ConceptClue("subject", "<s*>", vocab.concept_ids["<s*>"], torch.zeros(32), np.full((32, 32), 0.5))


def test_timestep_embedding_injective():
    feats = timestep_features(torch.arange(200), 32)
    d = torch.cdist(feats, feats) + torch.eye(200)
    assert d.min() > 0


def _inputs(model, vocab, seed=0):
    g = rng.stream(seed, "denoiser-input")
    z = rng.normal(g, (2, 3, 32, 32))
    cond = encode_prompt(vocab.tokenize("a photo of man ride horse"), model.text)
    return z, torch.tensor([5, 150]), cond


def test_predict_noise_deterministic_and_shape(tiny_model, vocab):
    z, t, cond = _inputs(tiny_model, vocab)
    a, b = predict_noise(tiny_model, z, t, cond), predict_noise(tiny_model, z, t, cond)
    assert a.shape == z.shape and torch.equal(a, b)
    assert predict_noise(tiny_model, z[0], 7, cond).shape == (3, 32, 32)


def test_non_finite_input(tiny_model, vocab):
    z, t, cond = _inputs(tiny_model, vocab)
    z[0, 0, 0, 0] = float("nan")
    with pytest.raises(NumericError):
        tiny_model(z, t, cond)


def test_capture_records_maps_for_every_cross_layer(tiny_model, vocab):
    z, t, cond = _inputs(tiny_model, vocab)
    with tiny_model.capture_maps():
        tiny_model(z, t, cond)
        layers = tiny_model.cross_layers(8)
        assert len(layers) == 2
        for layer in layers:
            assert layer.last_probs.shape == (2, 1, 64, 8)
    tiny_model(z, t, cond)
    assert all(l.last_probs is None for l in tiny_model.cross_layers())


def test_attention_layout(tiny_model):
    layers = tiny_model.attention_layers()
    assert len(layers) == 8
    assert sum(l.kind == "cross" for _, l in layers) == 4


def test_k_adapter_sensitivity_and_frozen_base(tiny_model, vocab):
    z, t, cond = _inputs(tiny_model, vocab)
    ref = tiny_model(z, t, cond)
    inject_adapters(tiny_model.attention_layers(), FreezePolicy(), gen=rng.stream(0))
    assert torch.equal(tiny_model(z, t, cond), ref)
    path, layer = tiny_model.attention_layers()[1]
    with torch.no_grad():
        layer.k_proj.adapter.B.add_(0.5)
    assert not torch.equal(tiny_model(z, t, cond), ref)
    assert not any(p.requires_grad for p in tiny_model.base_state().values())
    assert all(".adapter." not in k for k in tiny_model.base_state())
    detach_adapters(tiny_model.attention_layers())
    assert torch.equal(tiny_model(z, t, cond), ref)


def test_checkpoint_round_trip(tmp_path, tiny_model, vocab):
    path = save_base(tiny_model, tmp_path / "base.zip", {"note": "x"})
    loaded = load_base(path)
    assert base_checksum(loaded) == base_checksum(tiny_model)
    z, t, cond = _inputs(tiny_model, vocab)
    assert torch.equal(loaded(z, t, cond), tiny_model(z, t, cond))
    _, meta = archive.load(path)
    assert meta["checksum"] == base_checksum(tiny_model)


def test_checkpoint_missing_tensor(tmp_path, tiny_model):
    tensors = tiny_model.base_state()
    tensors.pop("conv_out.weight")
    path = archive.save(tmp_path / "bad.zip", tensors, {"config": tiny_model.cfg.to_dict()})
    with pytest.raises(ValueError, match="conv_out.weight"):
        load_base(path)


def test_latent_scale_round_trip():
    cfg = DenoiserConfig()
    img = np.linspace(-1, 1, 3 * 32 * 32, dtype=np.float32).reshape(3, 32, 32)
    z = cfg.encode_image(img)
    assert float(z.abs().max()) == pytest.approx(cfg.latent_scale)
    assert np.allclose(cfg.decode_latent(z), img, atol=1e-6)
    with pytest.raises(ValueError):
        DenoiserConfig(latent_scale=0.0)
