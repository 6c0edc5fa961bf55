"""The decoder's training loop as a single fused tape node.

Building the per-step graph from primitive ops costs a few thousand tape
nodes per update, and the gradient of every step re-accumulates into the
same large encoder-side arrays. decoder_loop runs the whole teacher-forced
recurrence (two LSTM layers with input feeding, bilinear attention with the
pointer log-prob, output and switch projections, the supervised-switch
token loss) in plain numpy, saves the per-step activations, and plays the
sequence backward by hand. Output-side and weight gradients batch over all
steps as single matrix products, and the loop writes into preallocated
buffers. The math is identical to composing the primitive ops; decoder
tests pin that equality.

Gate trick: sigmoid(z) = 0.5 + 0.5 tanh(0.5 z), so one tanh over a row of
stacked gates, scaled per column, evaluates sigmoid and tanh gates together.

Index arrays, masks, and flags enter as numpy constants and get no
gradient. Suffix padding is handled exactly: masked steps contribute zero
loss and zero gradient everywhere.
"""

from __future__ import annotations

from typing import Optional

import numpy as np

from .tensor import Tensor, _make, astensor


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # exact and overflow-free at both tails
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def _softplus(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))


def _log_softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    shifted = x - x.max(axis=axis, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))


def _bmv(mat: np.ndarray, vec: np.ndarray) -> np.ndarray:
    # (B, K, d) x (B, d) -> (B, K)
    return np.matmul(mat, vec[:, :, None])[:, :, 0]


def _bmv_t(mat: np.ndarray, vec: np.ndarray) -> np.ndarray:
    # (B, K, d) x (B, K) -> (B, d)
    return np.matmul(np.swapaxes(mat, 1, 2), vec[:, :, None])[:, :, 0]


def _stacked_outer(lhs: np.ndarray, rhs: np.ndarray) -> np.ndarray:
    # (T, B, K) x (T, B, d) -> (B, K, d), reducing over steps via batched gemm
    return np.matmul(lhs.transpose(1, 2, 0), rhs.transpose(1, 0, 2))


def decoder_loop(
    table,
    state0,
    alpha_proj,
    beta_proj,
    ctx_src,
    W1,
    b1,
    W2,
    b2,
    W_out,
    b_out,
    W_sw,
    b_sw,
    ent_add_mask: np.ndarray,
    rec_add_mask: Optional[np.ndarray],
    inp_ids: np.ndarray,
    tgt_ids: np.ndarray,
    copy_flag: np.ndarray,
    copy_ent: np.ndarray,
    copy_rec: Optional[np.ndarray],
    token_mask: np.ndarray,
) -> Tensor:
    """Per-example training loss of a teacher-forced batch, (B,).

    Hierarchical when beta_proj is given: alpha_proj (B, I, d) and beta_proj
    (B, I, J, d) score entities and records, the context mixes ctx_src
    (B, I, J, d) with the product weights, and the pointer log-prob picks
    copy_ent and copy_rec cells. Flat when beta_proj is None: alpha_proj
    (B, R, d) scores ctx_src (B, R, d) rows directly and copy_ent holds the
    linear pointer targets. state0 stacks (h1, c1, h2, c2); gate order inside
    the LSTM weights is input, forget, cell, output. All index and mask
    arrays are (B, T) numpy constants except the additive attention masks.
    """
    table, state0 = astensor(table), astensor(state0)
    alpha_proj, ctx_src = astensor(alpha_proj), astensor(ctx_src)
    hier = beta_proj is not None
    if hier:
        beta_proj = astensor(beta_proj)
    W1, b1, W2, b2 = astensor(W1), astensor(b1), astensor(W2), astensor(b2)
    W_out, b_out = astensor(W_out), astensor(b_out)
    W_sw, b_sw = astensor(W_sw), astensor(b_sw)

    B, four_d = state0.data.shape
    d = four_d // 4
    T = inp_ids.shape[1]
    if hier:
        I, J = rec_add_mask.shape[1:]
        K = I * J
        beta_flat = beta_proj.data.reshape(B, K, d)
    else:
        K = alpha_proj.data.shape[1]
    ctx_flat = ctx_src.data.reshape(B, K, d)
    if W1.data.shape != (3 * d, 4 * d) or W2.data.shape != (2 * d, 4 * d):
        raise ValueError(
            f"decoder_loop: LSTM weights {W1.data.shape}, {W2.data.shape} "
            f"do not match d={d}"
        )
    rows = np.arange(B)
    # per-column scale/shift that turns tanh over stacked gates into
    # (sigmoid, sigmoid, tanh, sigmoid)
    gate_scale = np.ones(4 * d)
    gate_scale[: 2 * d] = 0.5
    gate_scale[3 * d :] = 0.5
    gate_shift = np.full(4 * d, 0.5)
    gate_shift[2 * d : 3 * d] = 0.0

    emb = table.data[inp_ids.T]  # (T, B, d)
    # per-step activations, saved for the backward sweep
    S = np.empty((T + 1, B, 4 * d))  # stacked (h1, c1, h2, c2)
    S[0] = state0.data
    XH1 = np.empty((T, B, 3 * d))  # (emb, ctx_{t-1}, h1_{t-1})
    XH1[0, :, d : 2 * d] = 0.0  # c_0 is zero
    XH2 = np.empty((T, B, 2 * d))  # (h1_t, h2_{t-1})
    G1 = np.empty((T, B, 4 * d))  # gates after their nonlinearity
    G2 = np.empty((T, B, 4 * d))
    TC1 = np.empty((T, B, d))  # tanh of the new cell
    TC2 = np.empty((T, B, d))
    ALPHA = np.empty((T, B, alpha_proj.data.shape[1]))
    BETA = np.empty((T, B, I, J)) if hier else None
    WGT = np.empty((T, B, K)) if hier else ALPHA  # context mixture weights
    CTX = np.empty((T, B, d))
    LP = np.empty((T, B))  # pointer log-prob at the supervised cell
    tmp = np.empty((B, d))

    XH1[:, :, :d] = emb
    for t in range(T):
        prev = S[t]
        if t > 0:
            XH1[t, :, d : 2 * d] = CTX[t - 1]
        XH1[t, :, 2 * d :] = prev[:, :d]
        g1 = G1[t]
        np.matmul(XH1[t], W1.data, out=g1)
        g1 += b1.data
        g1 *= gate_scale
        np.tanh(g1, out=g1)
        g1 *= gate_scale
        g1 += gate_shift
        new = S[t + 1]
        c1n = new[:, d : 2 * d]
        np.multiply(g1[:, d : 2 * d], prev[:, d : 2 * d], out=c1n)
        np.multiply(g1[:, :d], g1[:, 2 * d : 3 * d], out=tmp)
        c1n += tmp
        np.tanh(c1n, out=TC1[t])
        np.multiply(g1[:, 3 * d :], TC1[t], out=new[:, :d])

        XH2[t, :, :d] = new[:, :d]
        XH2[t, :, d:] = prev[:, 2 * d : 3 * d]
        g2 = G2[t]
        np.matmul(XH2[t], W2.data, out=g2)
        g2 += b2.data
        g2 *= gate_scale
        np.tanh(g2, out=g2)
        g2 *= gate_scale
        g2 += gate_shift
        c2n = new[:, 3 * d :]
        np.multiply(g2[:, d : 2 * d], prev[:, 3 * d :], out=c2n)
        np.multiply(g2[:, :d], g2[:, 2 * d : 3 * d], out=tmp)
        c2n += tmp
        np.tanh(c2n, out=TC2[t])
        h2n = new[:, 2 * d : 3 * d]
        np.multiply(g2[:, 3 * d :], TC2[t], out=h2n)

        # attention, in the same kernel sequence as the step-by-step ops:
        # additive mask, log-softmax, exp, picks from the log arrays
        s_ent = _bmv(alpha_proj.data, h2n)
        s_ent += ent_add_mask
        ls_ent = _log_softmax(s_ent)
        np.exp(ls_ent, out=ALPHA[t])
        alpha = ALPHA[t]
        if hier:
            s_rec = _bmv(beta_flat, h2n).reshape(B, I, J)
            s_rec += rec_add_mask
            ls_rec = _log_softmax(s_rec)
            np.exp(ls_rec, out=BETA[t])
            wgt = WGT[t]
            np.multiply(alpha[:, :, None], BETA[t], out=wgt.reshape(B, I, J))
            LP[t] = (
                ls_ent[rows, copy_ent[:, t]]
                + ls_rec.reshape(B, K)[rows, copy_rec[:, t]]
            )
        else:
            wgt = alpha
            LP[t] = ls_ent[rows, copy_ent[:, t]]
        CTX[t] = np.matmul(wgt[:, None, :], ctx_flat)[:, 0]

    # output side, one batched pass over all steps
    dt_all = S[1:, :, 2 * d : 3 * d]  # (T, B, d)
    m = np.concatenate([dt_all, CTX], axis=2).reshape(T * B, 2 * d)
    ls = _log_softmax(m @ W_out.data + b_out.data)  # (T*B, V)
    u = (m @ W_sw.data)[:, 0] + b_sw.data[0]
    flat_rows = np.arange(T * B)
    tgt_f = tgt_ids.T.reshape(-1)
    flag_f = copy_flag.T.reshape(-1)
    mask_f = token_mask.T.reshape(-1)
    nll = flag_f * (_softplus(-u) - LP.reshape(-1)) + (1.0 - flag_f) * (
        _softplus(u) - ls[flat_rows, tgt_f]
    )
    out_data = (nll * mask_f).reshape(T, B).sum(axis=0)

    def backward(g):
        ge = mask_f * np.tile(g, T)
        du = ge * (_sigmoid(u) - flag_f)
        dpick = -ge * (1.0 - flag_f)
        ds = np.exp(ls)
        ds *= (-dpick)[:, None]
        ds[flat_rows, tgt_f] += dpick
        dm = ds @ W_out.data.T
        dm += du[:, None] * W_sw.data[:, 0][None, :]
        dm = dm.reshape(T, B, 2 * d)
        DDT = np.ascontiguousarray(dm[:, :, :d])
        DCTX = np.ascontiguousarray(dm[:, :, d:])
        d_lp = -(ge * flag_f).reshape(T, B)

        # batched local-derivative factors: sigmoid columns y(1-y),
        # tanh columns 1-y^2 = (1-y)(1+y)
        tanh_cols = np.zeros(4 * d)
        tanh_cols[2 * d : 3 * d] = 1.0
        D1 = (1.0 - G1) * (G1 + tanh_cols)
        D2 = (1.0 - G2) * (G2 + tanh_cols)
        OT1 = G1[:, :, 3 * d :] * (1.0 - TC1 * TC1)
        OT2 = G2[:, :, 3 * d :] * (1.0 - TC2 * TC2)

        DZ1 = np.empty((T, B, 4 * d))
        DZ2 = np.empty((T, B, 4 * d))
        DEMB = np.empty((T, B, d))
        DSE = np.empty_like(ALPHA)
        DSR = np.empty((T, B, K)) if hier else None
        W1T = np.ascontiguousarray(W1.data.T)
        W2T = np.ascontiguousarray(W2.data.T)
        gh1 = np.zeros((B, d))
        gc1 = np.zeros((B, d))
        gh2 = np.zeros((B, d))
        gc2 = np.zeros((B, d))
        dxh1 = np.empty((B, 3 * d))
        dxh2 = np.empty((B, 2 * d))
        gh_tot = np.empty((B, d))
        dc = np.empty((B, d))
        for t in range(T - 1, -1, -1):
            # attention: DCTX[t] already includes the input-feeding carry
            alpha = ALPHA[t]
            dw = _bmv(ctx_flat, DCTX[t])  # (B, K)
            if hier:
                beta = BETA[t]
                dwg = dw.reshape(B, I, J)
                dls_ent = (dwg * beta).sum(axis=-1) * alpha
                dls_ent[rows, copy_ent[:, t]] += d_lp[t]
                ds_ent = dls_ent - alpha * dls_ent.sum(axis=-1, keepdims=True)
                dls_rec = dwg * alpha[:, :, None] * beta
                dls_rec.reshape(B, K)[rows, copy_rec[:, t]] += d_lp[t]
                ds_rec = dls_rec - beta * dls_rec.sum(axis=-1, keepdims=True)
                DSR[t] = ds_rec.reshape(B, K)
                d_dt = _bmv_t(alpha_proj.data, ds_ent) + _bmv_t(beta_flat, DSR[t])
            else:
                dls_ent = dw * alpha
                dls_ent[rows, copy_ent[:, t]] += d_lp[t]
                ds_ent = dls_ent - alpha * dls_ent.sum(axis=-1, keepdims=True)
                d_dt = _bmv_t(alpha_proj.data, ds_ent)
            DSE[t] = ds_ent

            # layer 2
            g2 = G2[t]
            np.add(DDT[t], d_dt, out=gh_tot)
            gh_tot += gh2
            np.multiply(gh_tot, OT2[t], out=dc)
            dc += gc2
            dz2 = DZ2[t]
            np.multiply(dc, g2[:, 2 * d : 3 * d], out=dz2[:, :d])
            np.multiply(dc, S[t][:, 3 * d :], out=dz2[:, d : 2 * d])
            np.multiply(dc, g2[:, :d], out=dz2[:, 2 * d : 3 * d])
            np.multiply(gh_tot, TC2[t], out=dz2[:, 3 * d :])
            dz2 *= D2[t]
            np.matmul(dz2, W2T, out=dxh2)
            np.copyto(gh2, dxh2[:, d:])
            np.multiply(dc, g2[:, d : 2 * d], out=gc2)

            # layer 1
            g1 = G1[t]
            np.add(dxh2[:, :d], gh1, out=gh_tot)
            np.multiply(gh_tot, OT1[t], out=dc)
            dc += gc1
            dz1 = DZ1[t]
            np.multiply(dc, g1[:, 2 * d : 3 * d], out=dz1[:, :d])
            np.multiply(dc, S[t][:, d : 2 * d], out=dz1[:, d : 2 * d])
            np.multiply(dc, g1[:, :d], out=dz1[:, 2 * d : 3 * d])
            np.multiply(gh_tot, TC1[t], out=dz1[:, 3 * d :])
            dz1 *= D1[t]
            np.matmul(dz1, W1T, out=dxh1)
            DEMB[t] = dxh1[:, :d]
            if t > 0:
                DCTX[t - 1] += dxh1[:, d : 2 * d]
            np.copyto(gh1, dxh1[:, 2 * d :])
            np.multiply(dc, g1[:, d : 2 * d], out=gc1)

        if table.requires_grad:
            gt = np.zeros_like(table.data)
            np.add.at(gt, inp_ids.T.reshape(-1), DEMB.reshape(T * B, d))
            table._accumulate(gt)
        if state0.requires_grad:
            state0._accumulate(np.concatenate([gh1, gc1, gh2, gc2], axis=1))
        if alpha_proj.requires_grad:
            alpha_proj._accumulate(_stacked_outer(DSE, dt_all))
        if hier and beta_proj.requires_grad:
            beta_proj._accumulate(_stacked_outer(DSR, dt_all).reshape(B, I, J, d))
        if ctx_src.requires_grad:
            ctx_src._accumulate(_stacked_outer(WGT, DCTX).reshape(ctx_src.data.shape))
        if W1.requires_grad:
            W1._accumulate(XH1.reshape(T * B, 3 * d).T @ DZ1.reshape(T * B, 4 * d))
        if b1.requires_grad:
            b1._accumulate(DZ1.sum(axis=(0, 1)))
        if W2.requires_grad:
            W2._accumulate(XH2.reshape(T * B, 2 * d).T @ DZ2.reshape(T * B, 4 * d))
        if b2.requires_grad:
            b2._accumulate(DZ2.sum(axis=(0, 1)))
        if W_out.requires_grad:
            W_out._accumulate(m.T @ ds)
        if b_out.requires_grad:
            b_out._accumulate(ds.sum(axis=0))
        if W_sw.requires_grad:
            W_sw._accumulate(m.T @ du[:, None])
        if b_sw.requires_grad:
            b_sw._accumulate(np.array([du.sum()]))

    parents = (table, state0, alpha_proj, ctx_src, W1, b1, W2, b2, W_out, b_out, W_sw, b_sw)
    if hier:
        parents = parents + (beta_proj,)
    return _make(out_data, parents, backward)
