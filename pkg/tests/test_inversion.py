import itertools
from collections import Counter

import numpy as np
import pytest
import torch

from toyhoi import rng, scenes
from toyhoi.attention_lora import FreezePolicy
from toyhoi.backbone import Vocabulary, base_checksum
from toyhoi.inversion import (ABLATIONS, CONCEPT_ORDER, DegenerateMaskError, IncompatibleArtifactError,
                              InversionArtifact, TrainConfig, ablation_config, applied,
                              attention_alignment_loss, downsample_mask, invert, make_concepts,
                              masked_reconstruction_loss, reconstruction_loss, sample_concept_subset,
                              label_embeddings, source_prompt_text, total_loss)


@pytest.fixture(scope="module")
def concepts():
    _, masks = scenes.render(scenes.SceneSpec("man", "horse", "grass", "ride", 5))
    return make_concepts(masks, 32, Vocabulary(), rng.stream(0), 0.5)


def test_defaults():
    c = TrainConfig()
    assert (c.stage1_steps, c.stage1_lr, c.stage2_steps, c.stage2_lr) == (1000, 5e-4, 200, 1e-4)
    assert (c.batch, c.weight_decay, c.lambda_attn) == (1, 1e-4, 0.01)
    assert c.policy == FreezePolicy() and c.adapter_mode == "lora"
    assert not c.include_source_interaction
    with pytest.raises(ValueError):
        TrainConfig(batch=2)


def test_ablation_flags():
    assert ablation_config("w/o LoRA").adapter_mode == "dense"
    assert ablation_config("w/o SFT").policy == FreezePolicy.uniform(True, True, True)
    b = ablation_config("baseline")
    assert (b.disassembly, b.sft, b.lora) == (False, False, False)
    assert set(ABLATIONS) >= {"full", "w/o LoRA", "w/o SFT", "w/o Disass.", "baseline", "w/o SFT & LoRA"}


# -- subsets and prompts -------------------------------------------------------------

def test_singleton_subset(concepts):
    g = rng.stream(0)
    assert all(sample_concept_subset(concepts[:1], g) == concepts[:1] for _ in range(20))


def test_subset_frequencies_within_three_sigma(concepts):
    g = rng.stream(1, "subsets")
    n = 7000
    counts = Counter(tuple(c.label for c in sample_concept_subset(concepts, g)) for _ in range(n))
    all_subsets = [tuple(s) for k in (1, 2, 3) for s in itertools.combinations(CONCEPT_ORDER, k)]
    assert set(counts) == set(all_subsets)
    p = 1 / 7
    sigma = np.sqrt(n * p * (1 - p))
    for s in all_subsets:
        assert abs(counts[s] - n * p) <= 3 * sigma


def test_subset_reproducible(concepts):
    a = [tuple(c.label for c in sample_concept_subset(concepts, g)) for g in [rng.stream(3)] for _ in range(50)]
    b = [tuple(c.label for c in sample_concept_subset(concepts, g)) for g in [rng.stream(3)] for _ in range(50)]
    assert a == b


def test_source_prompt_templates(concepts):
    s, o, bg = concepts
    assert source_prompt_text([s, bg]) == "a photo of <s*> and <bg*>"
    assert source_prompt_text([o]) == "a photo of <o*>"
    assert source_prompt_text([bg, o, s]) == "a photo of <s*> and <o*> at <bg*>"
    assert source_prompt_text([s, o, bg], "ride") == "a photo of <s*> {i} <o*> at <bg*>"
    assert source_prompt_text([s, bg], "ride") == "a photo of <s*> and <bg*>"


def test_merged_concept_has_full_mask(concepts):
    _, masks = scenes.render(scenes.SceneSpec("man", "horse", "grass", "ride", 5))
    (merged,) = make_concepts(masks, 32, Vocabulary(), rng.stream(0), 0.5, disassembly=False)
    assert merged.token == "<c*>" and merged.mask.all()


# -- losses ----------------------------------------------------------------------------------

def test_masked_loss_cases():
    g = rng.stream(4, "rec")
    eps, eps_hat = rng.normal(g, (3, 6, 6)), rng.normal(g, (3, 6, 6))
    full = np.ones((6, 6), bool)
    assert masked_reconstruction_loss(eps, eps_hat, full).item() == pytest.approx(
        torch.mean((eps - eps_hat) ** 2).item(), rel=1e-6)
    assert masked_reconstruction_loss(eps, eps, full).item() == 0.0
    half = np.zeros((6, 6), bool)
    half[:, :3] = True
    total, count = 0.0, 0
    for c in range(3):
        for y in range(6):
            for x in range(6):
                if half[y, x]:
                    total += (float(eps[c, y, x]) - float(eps_hat[c, y, x])) ** 2
                    count += 1
    assert abs(masked_reconstruction_loss(eps, eps_hat, half).item() - total / count) < 1e-6
    with pytest.raises(DegenerateMaskError):
        masked_reconstruction_loss(eps, eps_hat, np.zeros((6, 6), bool))


def test_attention_loss_cases():
    mask = np.zeros((1, 4, 4))
    mask[0, :2] = 1
    m = torch.as_tensor(mask, dtype=torch.float32)
    assert attention_alignment_loss(m, mask).item() == 0.0
    assert attention_alignment_loss(1 - m, mask).item() == pytest.approx(1.0)
    with pytest.raises(ValueError):
        attention_alignment_loss(torch.zeros(1, 8, 8), mask)


def test_attention_loss_gradient_wrt_logits():
    g = rng.stream(5, "attn-grad")
    logits = rng.normal(g, (16,)).double().requires_grad_(True)
    mask = np.zeros((1, 4, 4))
    mask[0, 1:3, 1:3] = 1

    def f(lg):
        p = torch.softmax(lg, 0)
        m = (p - p.min()) / (p.max() - p.min())
        return attention_alignment_loss(m.view(1, 4, 4), mask)

    f(logits).backward()
    h = 1e-6
    for i in range(16):
        d = torch.zeros(16, dtype=torch.float64)
        d[i] = h
        num = (f(logits.detach() + d) - f(logits.detach() - d)).item() / (2 * h)
        ana = logits.grad[i].item()
        assert abs(num - ana) <= 1e-4 * max(abs(num), abs(ana), 1e-8)


def test_total_loss():
    assert total_loss(0.7, 3.0, 0.0) == 0.7
    assert total_loss(0.5, 2.0, 0.01) == pytest.approx(0.52)
    with pytest.raises(ValueError):
        total_loss(0.5, 2.0, -1.0)


def test_downsample_mask():
    m = np.zeros((32, 32), bool)
    m[0:8, 0:6] = True  # covers cell (0,0) fully, cell (0,1) by half
    d = downsample_mask(m, 8)
    assert d.shape == (8, 8)
    assert d[0, 0] and d[1, 0] and d[0, 1] and d[1, 1] and d.sum() == 4
    tiny = np.zeros((32, 32), bool)
    tiny[5, 5] = True
    assert downsample_mask(tiny, 8).sum() == 1
    with pytest.raises(ValueError):
        downsample_mask(m, 5)


# -- invert ------------------------------------------------------------------------------

@pytest.fixture(scope="module")
def scene():
    return scenes.render(scenes.SceneSpec("woman", "dog", "beach", "walk", 6))


@pytest.fixture(scope="module")
def small_model():
    from conftest import fresh_denoiser
    return fresh_denoiser(3)


def _short(**kw):
    return TrainConfig(stage1_steps=4, stage2_steps=3, **kw)


def test_invert_structure_and_freeze(scene, small_model):
    img, masks = scene
    before = {k: v.clone() for k, v in small_model.base_state().items()}
    art = invert(img, masks, None, small_model, _short())
    after = small_model.base_state()
    assert all(torch.equal(before[k], after[k]) for k in before)
    assert sorted(art.concepts) == ["background", "object", "subject"]
    assert len(art.adapters) == 16
    assert all(name.rsplit(".", 1)[1] in ("k", "v") for name in art.adapters)
    assert all(p.adapter is None for _, l in small_model.attention_layers()
               for p in (l.q_proj, l.k_proj, l.v_proj))
    assert art.source_prompt == "a photo of <s*> and <o*> at <bg*>"
    assert art.base_checksum == base_checksum(small_model)


@pytest.mark.parametrize("name,n_concepts,n_adapters,factor", [
    ("w/o LoRA", 3, 16, "delta"), ("w/o SFT", 3, 24, "lora_A"),
    ("w/o Disass.", 1, 16, "lora_A"), ("baseline", 1, 24, "delta")])
def test_ablation_artifacts(scene, small_model, name, n_concepts, n_adapters, factor):
    img, masks = scene
    art = invert(img, masks, None, small_model, ablation_config(name, stage1_steps=1, stage2_steps=1))
    assert len(art.concepts) == n_concepts and len(art.adapters) == n_adapters
    assert all(factor in f for f in art.adapters.values())


def test_trainable_parameter_counts_closed_form(small_model):
    d = small_model.cfg.d_text
    layers = small_model.attention_layers()
    r = 4
    lora = sum(r * (l.k_proj.shape[0] + l.k_proj.shape[1]) + r * (l.v_proj.shape[0] + l.v_proj.shape[1])
               for _, l in layers)
    dense = sum(l.k_proj.shape[0] * l.k_proj.shape[1] + l.v_proj.shape[0] * l.v_proj.shape[1] for _, l in layers)
    tokens = 3 * d
    # two blocks of width 32 and two of width 64; text context 32:
    # LoRA  2*(4*64*4) + 2*(2*4*128 + 2*4*96) = 5632
    # dense 2*(4*32*32) + 2*(2*64*64 + 2*64*32) = 32768
    assert (lora, dense, tokens) == (5632, 32768, 96)
    assert dense > lora > tokens


def test_empty_mask_rejected(scene, small_model):
    img, masks = scene
    bad = dict(masks, object=np.zeros_like(masks["object"]))
    with pytest.raises(DegenerateMaskError):
        invert(img, bad, None, small_model, _short())


def test_wrong_image_shape(scene, small_model):
    _, masks = scene
    with pytest.raises(ValueError):
        invert(np.zeros((3, 16, 16), np.float32), masks, None, small_model, _short())


def test_archive_round_trip_and_apply(scene, small_model, tmp_path):
    img, masks = scene
    art = invert(img, masks, None, small_model, _short())
    data = art.dumps()
    again = InversionArtifact.loads(data)
    assert again.dumps() == data
    assert again.config == art.config and again.tokens == art.tokens
    vocab = Vocabulary()
    seq = vocab.tokenize("a photo of <s*> ride <o*> at <bg*>")
    z = rng.normal(rng.stream(0), (1, 3, 32, 32))
    from toyhoi.backbone import encode_prompt
    with applied(small_model, art) as clues:
        cond = encode_prompt(seq, small_model.text, clues)
        out1 = small_model(z, 50, cond)
        by = {c.label: c for c in clues}
        assert torch.equal(cond[3], art.concepts["subject"])
        assert torch.equal(by["object"].embedding, art.concepts["object"])
    with applied(small_model, again) as clues:
        out2 = small_model(z, 50, encode_prompt(seq, small_model.text, clues))
    assert torch.equal(out1, out2)
    pristine = small_model(z, 50, cond)
    assert not torch.equal(out1, pristine) or all(torch.count_nonzero(f["lora_B"]) == 0
                                                  for f in art.adapters.values())


def test_apply_refuses_other_base(scene, small_model):
    from conftest import fresh_denoiser
    img, masks = scene
    art = invert(img, masks, None, small_model, _short())
    other = fresh_denoiser(99)
    with pytest.raises(IncompatibleArtifactError):
        with applied(other, art):
            pass
    with applied(other, art, force=True):
        pass


def test_stage_one_leaves_adapters_at_init(scene, small_model):
    from toyhoi.attention_lora import inject_adapters, detach_adapters
    img, masks = scene
    cfg = TrainConfig(stage1_steps=5, stage2_steps=0, seed=2)
    art = invert(img, masks, None, small_model, cfg)
    names = inject_adapters(small_model.attention_layers(), cfg.policy, gen=rng.stream(2, "adapters"),
                            ranks=cfg.ranks)
    layers = dict(small_model.attention_layers())
    for name in names:
        path, proj = name.rsplit(".", 1)
        init = layers[path].projection(proj).adapter
        assert torch.equal(init.A, art.adapters[name]["lora_A"])
        assert torch.equal(init.B, art.adapters[name]["lora_B"])
    detach_adapters(small_model.attention_layers())
    init_concepts = make_concepts(masks, 32, Vocabulary(), rng.stream(2, "concepts"),
                                  float(small_model.text.weight.std()))
    for c in init_concepts:
        assert torch.linalg.norm(art.concepts[c.label] - c.embedding.detach()) > 0


def test_label_embeddings_lookup(small_model):
    vocab = Vocabulary(small_model.cfg)
    got = label_embeddings({"subject": "Woman", "object": "dog", "background": "no-such-word"}, vocab, small_model)
    assert sorted(got) == ["object", "subject"]
    assert torch.equal(got["subject"], small_model.text.weight[vocab.ids["woman"]])
    assert label_embeddings(None, vocab, small_model) == {}


def test_concepts_start_at_label_words(scene, small_model):
    _, masks = scene
    vocab = Vocabulary(small_model.cfg)
    words = label_embeddings({"subject": "woman", "object": "dog"}, vocab, small_model)
    d = small_model.cfg.d_text
    seeded = make_concepts(masks, d, vocab, rng.stream(0), 0.1, init_words=words)
    plain = make_concepts(masks, d, vocab, rng.stream(0), 0.1)
    by = {c.label: c for c in seeded}
    assert torch.equal(by["subject"].embedding.detach(), words["subject"])
    assert torch.equal(by["object"].embedding.detach(), words["object"])
    # unlabelled concepts get the same random draw as without init words
    assert torch.equal(by["background"].embedding, plain[2].embedding)
    (merged,) = make_concepts(masks, d, vocab, rng.stream(0), 0.1, disassembly=False, init_words=words)
    assert torch.equal(merged.embedding, make_concepts(masks, d, vocab, rng.stream(0), 0.1, disassembly=False)[0].embedding)


def test_invert_uses_labels_unless_disabled(scene, small_model):
    img, masks = scene
    labels = {"subject": "woman", "object": "dog", "background": "beach"}
    cfg0 = TrainConfig(stage1_steps=0, stage2_steps=0)
    art = invert(img, masks, labels, small_model, cfg0)
    vocab = Vocabulary(small_model.cfg)
    for key, word in labels.items():
        assert torch.equal(art.concepts[key], small_model.text.weight[vocab.ids[word]])
    off = invert(img, masks, labels, small_model, TrainConfig(stage1_steps=0, stage2_steps=0, init_from_labels=False))
    assert not torch.equal(off.concepts["subject"], art.concepts["subject"])
    assert art.config_hash() != off.config_hash()


def test_reconstruction_loss_helper(scene, small_model):
    img, masks = scene
    art = invert(img, masks, None, small_model, _short())
    a = reconstruction_loss(small_model, art, img, seed=1, n=4)
    assert a == reconstruction_loss(small_model, art, img, seed=1, n=4) and a > 0


def test_source_interaction_flag(scene, small_model):
    img, masks = scene
    art = invert(img, masks, None, small_model, _short(include_source_interaction=True), source_interaction="walk")
    assert art.config.include_source_interaction and art.source_interaction == "walk"
