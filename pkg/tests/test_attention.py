"""Joint attention and shape-steered modulation of its foreground sub-blocks."""

import numpy as np
import pytest
import torch

from intercomp.attention import (
    AttentionSlice,
    SEG_BACKGROUND,
    SEG_DETAIL,
    SEG_ID,
    SEG_IMAGE,
    SEG_REGION,
    SEG_TEXT,
    apply_modulated,
    extract_fg_slices,
    joint_attention,
    modulate_nonresidual,
    modulate_residual,
    nonresidual_modulation,
    residual_modulation,
    segment_indices,
)
from intercomp.errors import ConfigurationError, ParameterError, ShapeError, ValidationError


def naive_attention(q, k, v):
    """Reference: explicit loops, no vectorized matmul."""
    n, d = q.shape
    m = k.shape[0]
    logits = np.zeros((n, m))
    for i in range(n):
        for j in range(m):
            logits[i, j] = sum(q[i, t] * k[j, t] for t in range(d)) / np.sqrt(d)
    attn = np.exp(logits - logits.max(axis=1, keepdims=True))
    attn /= attn.sum(axis=1, keepdims=True)
    out = np.zeros((n, v.shape[1]))
    for i in range(n):
        for j in range(m):
            out[i] += attn[i, j] * v[j]
    return out, attn


def test_joint_attention_matches_naive_oracle():
    rng = np.random.default_rng(0)
    q = rng.standard_normal((7, 5))
    k = rng.standard_normal((9, 5))
    v = rng.standard_normal((9, 4))
    out, attn = joint_attention(q, k, v)
    ref_out, ref_attn = naive_attention(q, k, v)
    assert np.allclose(out.numpy(), ref_out, atol=1e-6)
    assert np.allclose(attn.numpy(), ref_attn, atol=1e-6)
    assert np.allclose(attn.sum(dim=-1).numpy(), 1.0, atol=1e-6)


def test_joint_attention_shape_checks():
    with pytest.raises(ShapeError):
        joint_attention(np.zeros((3, 4)), np.zeros((3, 5)), np.zeros((3, 4)))
    with pytest.raises(ShapeError):
        joint_attention(np.zeros((3, 4)), np.zeros((5, 4)), np.zeros((6, 4)))
    with pytest.raises(ShapeError):
        joint_attention(
            np.zeros((3, 4)), np.zeros((5, 4)), np.zeros((5, 4)),
            segment_labels=[SEG_TEXT] * 4,
        )


def _joint_labels():
    return (
        [SEG_IMAGE] * 4 + [SEG_TEXT] * 3 + [SEG_ID] * 2
        + [SEG_DETAIL] + [SEG_REGION] + [SEG_BACKGROUND]
    )


def test_segment_indices():
    labels = _joint_labels()
    assert segment_indices(labels, SEG_IMAGE).tolist() == [0, 1, 2, 3]
    assert segment_indices(labels, SEG_ID).tolist() == [7, 8]


def test_extract_fg_slices_coordinates_and_values():
    labels = _joint_labels()
    n = len(labels)
    rng = np.random.default_rng(1)
    logits = rng.standard_normal((n, n))
    attn = torch.softmax(torch.from_numpy(logits), dim=-1)
    text_block, id_block = extract_fg_slices(attn, labels, fg_token_indices=(1, 2))
    assert text_block.rows.tolist() == [0, 1, 2, 3]
    # fg indices 1, 2 within the text segment sit at joint columns 5, 6
    assert text_block.cols.tolist() == [5, 6]
    assert id_block.cols.tolist() == [7, 8]
    assert torch.equal(text_block.matrix, attn[:4, 5:7])
    assert torch.equal(id_block.matrix, attn[:4, 7:9])


def test_extract_fg_slices_validation():
    labels = _joint_labels()
    n = len(labels)
    attn = torch.full((n, n), 1.0 / n)
    with pytest.raises(ShapeError):
        extract_fg_slices(attn[:, :-1], labels, (0,))
    with pytest.raises(ValidationError):
        extract_fg_slices(attn, ["bogus"] + labels[1:], (0,))
    with pytest.raises(ConfigurationError):
        extract_fg_slices(attn, labels, ())
    with pytest.raises(ConfigurationError):
        extract_fg_slices(attn, labels, (3,))  # only 3 text tokens
    no_img = [SEG_TEXT] * n
    with pytest.raises(ConfigurationError):
        extract_fg_slices(attn, no_img, (0,))


def test_residual_modulation_oracle_rows():
    row = torch.tensor([[0.2, 0.3, 0.5]], dtype=torch.float64)
    on = torch.tensor([1.0], dtype=torch.float64)
    off = torch.tensor([0.0], dtype=torch.float64)
    out = residual_modulation(row, on, 0.5)
    assert torch.allclose(out, torch.tensor([[0.35, 0.40, 0.50]], dtype=torch.float64), atol=1e-9)
    out = residual_modulation(row, on, 1.0)
    assert torch.allclose(out, torch.tensor([[0.5, 0.5, 0.5]], dtype=torch.float64), atol=1e-9)
    out = residual_modulation(row, off, 0.5)
    assert torch.allclose(out, torch.tensor([[0.20, 0.25, 0.35]], dtype=torch.float64), atol=1e-9)
    out = residual_modulation(row, on, 0.0)
    assert torch.allclose(out, row, atol=1e-12)


def test_residual_modulation_preserves_row_range():
    rng = np.random.default_rng(2)
    mat = torch.from_numpy(rng.random((50, 8)) * 0.12)
    mask = torch.from_numpy(rng.random(50))
    for alpha in (0.0, 0.25, 0.7, 1.0):
        out = residual_modulation(mat, mask, alpha)
        lo = mat.amin(dim=-1, keepdim=True)
        hi = mat.amax(dim=-1, keepdim=True)
        assert bool((out >= lo - 1e-12).all())
        assert bool((out <= hi + 1e-12).all())


def test_residual_modulation_interior_gradient_is_one_minus_alpha():
    # for an entry that is neither the row max nor min, d out/d a = 1 - alpha
    mat = torch.tensor([[0.1, 0.3, 0.6]], dtype=torch.float64, requires_grad=True)
    alpha = 0.3
    out = residual_modulation(mat, torch.tensor([0.7], dtype=torch.float64), alpha)
    out[0, 1].backward()
    assert mat.grad[0, 1].item() == pytest.approx(1.0 - alpha, rel=1e-9)


def test_residual_modulation_broadcasts_over_heads():
    rng = np.random.default_rng(3)
    mat = torch.from_numpy(rng.random((2, 4, 6, 5)) * 0.2)
    mask = torch.from_numpy(rng.random(6))
    out = residual_modulation(mat, mask, 0.5)
    assert out.shape == mat.shape
    ref = residual_modulation(mat[1, 2], mask, 0.5)
    assert torch.allclose(out[1, 2], ref, atol=1e-12)


def test_nonresidual_modulation_oracle_and_preclamp_violation():
    out = nonresidual_modulation(
        torch.tensor([[0.3]], dtype=torch.float64), torch.tensor([1.0], dtype=torch.float64), 0.1
    )
    assert out.item() == pytest.approx(0.4, abs=1e-12)
    out = nonresidual_modulation(
        torch.tensor([[0.05]], dtype=torch.float64), torch.tensor([0.0], dtype=torch.float64), 0.1
    )
    assert out.item() == pytest.approx(0.0, abs=1e-12)  # 0.05 - 0.1 clamps to 0
    # the unclamped shift leaves [0, 1] while the residual variant cannot
    raw = 0.05 + 0.1 * (2.0 * 0.0 - 1.0)
    assert raw < 0.0


def test_attention_slice_validation():
    mat = torch.tensor([[0.1, 0.2, 0.3]], dtype=torch.float64)
    sl = AttentionSlice.from_matrix(mat, torch.tensor([0.5], dtype=torch.float64), alpha=0.5)
    assert torch.allclose(sl.row_max, torch.tensor([0.3], dtype=torch.float64))
    assert torch.allclose(sl.row_min, torch.tensor([0.1], dtype=torch.float64))
    with pytest.raises(ValidationError):
        AttentionSlice.from_matrix(
            torch.tensor([[0.5, 0.7]], dtype=torch.float64),  # row sums to 1.2
            torch.tensor([0.5], dtype=torch.float64),
        )
    with pytest.raises(ValidationError):
        AttentionSlice.from_matrix(mat, torch.tensor([1.5], dtype=torch.float64))
    with pytest.raises(ValidationError):
        AttentionSlice(
            matrix=mat,
            row_max=torch.tensor([0.9], dtype=torch.float64),
            row_min=torch.tensor([0.1], dtype=torch.float64),
            shape_mask=torch.tensor([0.5], dtype=torch.float64),
        )
    with pytest.raises(ParameterError):
        AttentionSlice.from_matrix(mat, torch.tensor([0.5], dtype=torch.float64), alpha=-0.1)
    with pytest.raises(ShapeError):
        AttentionSlice.from_matrix(mat, torch.tensor([0.5, 0.5], dtype=torch.float64))


def test_modulate_wrappers_match_functional_forms():
    rng = np.random.default_rng(4)
    mat = torch.from_numpy(rng.random((6, 4)) * 0.2)
    mask = torch.from_numpy(rng.random(6))
    sl = AttentionSlice.from_matrix(mat, mask, alpha=0.6)
    assert torch.allclose(modulate_residual(sl), residual_modulation(mat, mask, 0.6))
    assert torch.allclose(modulate_nonresidual(sl), nonresidual_modulation(mat, mask, 0.6))


def test_apply_modulated_splices_without_renormalizing():
    labels = _joint_labels()
    n = len(labels)
    rng = np.random.default_rng(5)
    attn = torch.softmax(torch.from_numpy(rng.standard_normal((n, n))), dim=-1)
    values = torch.from_numpy(rng.standard_normal((n, 4)))
    text_block, id_block = extract_fg_slices(attn, labels, (0, 1))
    mask = torch.from_numpy(rng.random(len(text_block.rows)))
    mod_text = residual_modulation(text_block.matrix, mask, 1.0)
    mod_id = residual_modulation(id_block.matrix, mask, 1.0)
    out, spliced = apply_modulated(attn, values, [(text_block, mod_text), (id_block, mod_id)])
    # fg indices (0, 1) land on joint columns 4, 5; id tokens on 7, 8
    assert text_block.cols.tolist() == [4, 5]
    assert torch.allclose(spliced[:4, 4:6], mod_text)
    assert torch.allclose(spliced[:4, 7:9], mod_id)
    untouched = spliced.clone()
    untouched[:4, 4:6] = attn[:4, 4:6]
    untouched[:4, 7:9] = attn[:4, 7:9]
    assert torch.allclose(untouched, attn)
    # no renormalization: modulated rows need not sum to 1 any more
    assert not torch.allclose(spliced[:4].sum(dim=-1), torch.ones(4, dtype=spliced.dtype))
    # output is the plain product with the spliced matrix
    assert torch.allclose(out, spliced @ values, atol=1e-12)


def test_apply_modulated_rejects_overlap_and_bad_shapes():
    labels = _joint_labels()
    n = len(labels)
    attn = torch.full((n, n), 1.0 / n, dtype=torch.float64)
    values = torch.zeros((n, 3), dtype=torch.float64)
    text_block, _ = extract_fg_slices(attn, labels, (0, 1))
    with pytest.raises(ConfigurationError):
        apply_modulated(
            attn, values,
            [(text_block, text_block.matrix), (text_block, text_block.matrix)],
        )
    with pytest.raises(ShapeError):
        apply_modulated(attn, values, [(text_block, text_block.matrix[:, :1])])
    with pytest.raises(ShapeError):
        apply_modulated(attn[None], values, [])
    with pytest.raises(ShapeError):
        apply_modulated(attn, values[:-1], [])
