import numpy as np
import pytest
import torch

from promptseg.model import (
    EPS,
    ModelConfig,
    MultiHeadCrossAttention,
    MultiModalFusionBlock,
    PromptSegmenter,
    PyramidDecoder,
    SelectiveGate,
    segmentation_loss,
)
from promptseg.model.text import normalize
from promptseg.prompts import ENDOVIS2018, description_prompt, name_prompt

from .gradcheck import BLOCKS, TOL, check_stage, check_text_encoder, fd_errors

SEEDS = [0, 1, 2, 3, 4]


def small_cfg(**kw):
    base = dict(base_channels=8, text_dim=8, fusion_dim=8, decoder_dim=8, num_heads=2, language_token_count=4)
    base.update(kw)
    return ModelConfig.for_lexicon(ENDOVIS2018, **base)


@pytest.fixture(scope="module")
def model():
    torch.manual_seed(0)
    return PromptSegmenter(ModelConfig.for_lexicon(ENDOVIS2018)).eval()


def test_tokenization():
    assert normalize("The bipolar forceps") == ["the", "bipolar", "forceps"]
    assert normalize("claw-like Tips.") == ["claw", "like", "tips"]


def test_encode_text(model):
    lang = model.encode_text(["The bipolar forceps"])
    assert lang.values.shape == (1, 3, model.cfg.text_dim) and lang.num_tokens == 3
    again = model.encode_text(["The bipolar forceps"])
    assert torch.equal(lang.values, again.values)
    with pytest.raises(ValueError):
        model.encode_text([""])
    with pytest.raises(ValueError):
        model.encode_text(["?!"])
    unk = model.encode_text(["The zebra"])  # out-of-vocabulary word maps to <unk>
    assert unk.num_tokens == 2


def test_config_validation():
    with pytest.raises(ValueError):
        small_cfg(num_heads=3)
    with pytest.raises(ValueError):
        small_cfg(lam=-1.0)
    with pytest.raises(ValueError):
        small_cfg(existence_level=5)
    with pytest.raises(ValueError):
        small_cfg(existence_pool="median")
    cfg = small_cfg()
    assert ModelConfig.from_dict(cfg.to_dict()) == cfg
    assert ModelConfig.for_lexicon(ENDOVIS2018).language_token_count == 20


@pytest.mark.parametrize("size", [64, 96, 480])
def test_stage_shape_law(size):
    torch.manual_seed(0)
    m = PromptSegmenter(small_cfg()).eval()
    with torch.no_grad():
        lang = m.encode_text(["The clip applier"])
        sf = m.encoder(torch.rand(1, 3, size, size), lang.values, lang.mask)
    for i, f in enumerate(sf.f, start=1):
        assert f.shape[1:] == (8 * 2 ** (i - 1), size // 2 ** (i + 1), size // 2 ** (i + 1))
        assert sf.v[i - 1].shape == f.shape


def test_stage_dims_64():
    torch.manual_seed(0)
    m = PromptSegmenter(small_cfg()).eval()
    with torch.no_grad():
        out = m(torch.rand(1, 3, 64, 64), ["The clip applier"])
    assert [s[1:] for s in out.stages.shapes] == [(16, 16), (8, 8), (4, 4), (2, 2)]
    assert out.pyramid[0].shape[-2:] == (16, 16)
    assert out.mask.shape == (1, 64, 64)


def test_forward_rejects_bad_sizes(model):
    with pytest.raises(ValueError):
        model(torch.rand(1, 3, 48, 64), ["The clip applier"])
    with pytest.raises(ValueError):
        model(torch.rand(2, 3, 64, 64), ["The clip applier"])


def test_residual_identity_when_gates_closed():
    torch.manual_seed(3)
    m = PromptSegmenter(small_cfg()).eval()
    for g in m.encoder.sgb:
        g.force_gate = 0.0
    with torch.no_grad():
        out = m(torch.rand(2, 3, 64, 64), ["The clip applier", "The bipolar forceps on the left top"])
    for f, v in zip(out.stages.f, out.stages.v):
        assert torch.equal(f, v)


def test_gate_forced_open_passes_fused():
    g = SelectiveGate(6)
    x = torch.randn(3, 6)
    g.force_gate = 1.0
    assert torch.equal(g(x), x)
    g.force_gate = 0.0
    assert not g(x).any()
    g.force_gate = None
    assert torch.all(g(x).abs() <= x.abs())


def test_mmfb_shape_and_ablation():
    v, l = torch.randn(2, 10, 16), torch.randn(2, 5, 12)
    mask = torch.tensor([[1, 1, 1, 1, 1], [1, 1, 1, 0, 0]], dtype=torch.bool)
    for lt in (True, False):
        blk = MultiModalFusionBlock(16, 12, 8, 2, num_tokens=20, use_language_tokens=lt)
        out, kv, kv_mask = blk(v, l, mask)
        assert out.shape == v.shape
        assert kv.shape[1] == (20 if lt else 5)
        assert hasattr(blk, "tokens") == lt


def test_zero_value_path_gives_zero_attention():
    attn = MultiHeadCrossAttention(4, 6, 8, 2)
    with torch.no_grad():
        attn.v_proj.weight.zero_()
        attn.v_proj.bias.zero_()
        attn.out_proj.bias.zero_()
    out = attn(torch.randn(2, 3, 4), torch.zeros(2, 5, 6))
    assert not out.any()


def test_masked_keys_get_no_weight():
    attn = MultiHeadCrossAttention(4, 6, 8, 2)
    q, kv = torch.randn(1, 3, 4), torch.randn(1, 5, 6)
    mask = torch.tensor([[1, 1, 0, 0, 0]], dtype=torch.bool)
    a = attn(q, kv, mask)
    kv2 = kv.clone()
    kv2[:, 2:] = 100.0
    assert torch.allclose(a, attn(q, kv2, mask))


def test_zero_features_zero_head_gives_half():
    dec = PyramidDecoder([4, 8, 16, 32], 8)
    f = [torch.zeros(1, c, 16 // 2 ** i, 16 // 2 ** i) for i, c in enumerate([4, 8, 16, 32])]
    pyr = dec(f)
    mask = torch.sigmoid(dec.mask_logits(pyr[0], (64, 64)))
    assert torch.equal(mask, torch.full((1, 64, 64), 0.5))


def test_existence_in_open_interval_and_deterministic(model):
    x = torch.rand(4, 3, 64, 64)
    prompts = [name_prompt(c, ENDOVIS2018) for c in range(4)]
    with torch.no_grad():
        a = model(x, prompts).existence
        b = model(x, prompts).existence
    assert torch.equal(a, b)
    assert torch.all((a > 0) & (a < 1))


def test_existence_query_level_and_pool():
    torch.manual_seed(0)
    x = torch.rand(2, 3, 64, 64)
    prompts = ["The clip applier", "The bipolar forceps"]
    for level in (1, 4):
        for pool in ("mean", "max"):
            m = PromptSegmenter(small_cfg(existence_level=level, existence_pool=pool)).eval()
            with torch.no_grad():
                m.existence.classifier.weight.normal_()
                out = m(x, prompts)
                feature = out.pyramid[level - 1]
                q = feature.mean((2, 3)) if pool == "mean" else feature.amax((2, 3))
                kv, kv_mask = out.language.values, out.language.mask
                y = m.existence.norm(q[:, None] + m.existence.attn(q[:, None], kv, kv_mask))
            assert torch.allclose(out.exist_logits, m.existence.classifier(y)[:, 0, 0])


@pytest.mark.parametrize("bias", [-80.0, 12.0, 80.0])
def test_trained_like_extremes_stay_open(bias):
    torch.manual_seed(0)
    m = PromptSegmenter(small_cfg()).eval()
    with torch.no_grad():
        m.existence.classifier.bias.fill_(bias)
        m.decoder.mask_head.bias.fill_(bias)
        out = m(torch.rand(2, 3, 64, 64), ["The clip applier", "The clip applier"])
    for p in (out.existence, out.mask):
        assert torch.all((p > 0) & (p < 1))


def test_predict_contract(model):
    img = np.random.default_rng(0).random((64, 64, 3)).astype(np.float32)
    preds = model.predict(img, [name_prompt(0, ENDOVIS2018)])
    assert preds[0].mask.shape == (64, 64)
    assert 0 < preds[0].existence < 1
    again = model.predict(img, [name_prompt(0, ENDOVIS2018)])
    np.testing.assert_array_equal(preds[0].mask, again[0].mask)


def test_batching_equivalence():
    torch.manual_seed(1)
    m = PromptSegmenter(ModelConfig.for_lexicon(ENDOVIS2018)).eval()
    rng = np.random.default_rng(0)
    imgs = rng.random((5, 64, 64, 3)).astype(np.float32)
    prompts = [name_prompt(0, ENDOVIS2018), description_prompt(3, ENDOVIS2018),
               "The ultrasound probe on the right top", name_prompt(6, ENDOVIS2018),
               description_prompt(1, ENDOVIS2018)]
    batched = m.predict(imgs, prompts)
    for i in range(5):
        single = m.predict(imgs[i:i + 1], prompts[i:i + 1])[0]
        np.testing.assert_allclose(single.mask, batched[i].mask, atol=1e-6, rtol=0)
        assert abs(single.existence - batched[i].existence) <= 1e-6


@pytest.mark.parametrize("flags", [
    dict(use_mmfb=True, use_sgb=False, use_raw_language=False, use_language_tokens=False),
    dict(use_mmfb=True, use_sgb=True, use_raw_language=False, use_language_tokens=False),
    dict(use_mmfb=True, use_sgb=True, use_raw_language=True, use_language_tokens=False),
    dict(use_mmfb=True, use_sgb=True, use_raw_language=True, use_language_tokens=True),
    dict(use_mmfb=False),
])
def test_ablation_variants_run(flags):
    torch.manual_seed(0)
    m = PromptSegmenter(small_cfg(**flags)).eval()
    with torch.no_grad():
        out = m(torch.rand(2, 3, 64, 64), ["The clip applier", "The clip applier on the left top"])
    assert out.mask.shape == (2, 64, 64)
    if not flags.get("use_mmfb", True):
        for f, v in zip(out.stages.f, out.stages.v):
            assert torch.equal(f, v)
    if flags.get("use_mmfb", True) and not flags["use_sgb"]:
        assert not hasattr(m.encoder, "sgb")
    raw = flags.get("use_raw_language", True) or not flags.get("use_mmfb", True)
    assert m.existence.attn.k_proj.in_features == (8 if raw else m.encoder.dims[-1])


def test_loss_closed_forms():
    gt = torch.zeros(1, 4, 4)
    gt[0, :2] = 1
    half = torch.full((1, 4, 4), 0.5)
    one = torch.tensor([1.0])
    assert segmentation_loss(torch.tensor([0.5]), one, half, gt, 0.0).item() == pytest.approx(np.log(2), abs=1e-6)
    assert segmentation_loss(torch.tensor([0.5]), one, half, gt, 1.0).item() == pytest.approx(2 * np.log(2), abs=1e-6)
    perfect = segmentation_loss(torch.tensor([1.0], dtype=torch.float64), one.double(), gt.double(), gt.double(), 1.0)
    assert 0 <= perfect.item() <= 2 * -np.log(1 - EPS)
    extreme = segmentation_loss(torch.tensor([0.0]), one, 1 - gt, gt, 1.0)
    assert torch.isfinite(extreme)
    with pytest.raises(ValueError):
        segmentation_loss(torch.tensor([0.5]), one, half, torch.zeros(1, 3, 3), 1.0)


def test_lambda_zero_blocks_mask_head_gradient():
    torch.manual_seed(0)
    m = PromptSegmenter(small_cfg())
    with torch.no_grad():
        m.decoder.mask_head.weight.normal_()
    out = m(torch.rand(2, 3, 64, 64), ["The clip applier", "The bipolar forceps"])
    loss = segmentation_loss(out.existence, torch.tensor([1.0, 0.0]), out.mask, torch.zeros(2, 64, 64), 0.0)
    loss.backward()
    for p in m.decoder.mask_head.parameters():
        assert p.grad is None or not p.grad.any()


# -- finite-difference gradient checks (float64) ---------------------------------


@pytest.mark.parametrize("seed", SEEDS)
@pytest.mark.parametrize("block", sorted(BLOCKS))
def test_gradcheck_blocks(block, seed):
    errs = BLOCKS[block](seed)
    assert max(errs.values()) <= TOL, {k: v for k, v in errs.items() if v > TOL}


@pytest.mark.parametrize("seed", SEEDS[:2])
@pytest.mark.parametrize("check", [check_stage, check_text_encoder])
def test_gradcheck_encoders(check, seed):
    errs = check(seed)
    assert max(errs.values()) <= TOL, errs


def test_gradcheck_flags_a_slightly_wrong_gradient():
    x = torch.randn(6, dtype=torch.float64, requires_grad=True)
    x.register_hook(lambda g: g * 1.001)
    assert fd_errors(lambda: (x ** 3).sum(), {"x": x})["x"] > TOL
