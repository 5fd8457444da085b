"""Layer primitives built on the tape: affine chains, message passing, conv stacks.

Parameters are created lazily in the given ParamStore under slash-separated
names, so a layer is identified by (store, name) and reuses its weights on
every call.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from spectrl.nn import tape
from spectrl.nn.params import ParamStore
from spectrl.nn.tape import Tensor

__all__ = ["conv_stack", "gnn_step", "linear", "mlp_forward"]

Activation = Callable[[Tensor], Tensor] | None


def linear(store: ParamStore, name: str, x: Tensor, out_dim: int) -> Tensor:
    in_dim = x.data.shape[-1]
    w = store.param(f"{name}/w", (in_dim, out_dim), fan_in=in_dim)
    b = store.param(f"{name}/b", (out_dim,))
    return tape.matmul(x, w) + b


def mlp_forward(store: ParamStore, name: str, x: Tensor, layer_sizes: Sequence[int],
                hidden_activation: Activation = tape.tanh,
                output_activation: Activation = None) -> Tensor:
    """Affine chain; hidden_activation between layers, output_activation on the last."""
    if not layer_sizes:
        raise ValueError("mlp_forward needs at least one layer size")
    h = x
    last = len(layer_sizes) - 1
    for i, size in enumerate(layer_sizes):
        h = linear(store, f"{name}/l{i}", h, size)
        act = output_activation if i == last else hidden_activation
        if act is not None:
            h = act(h)
    return h


def gnn_step(store: ParamStore, node_feats: Tensor, edges: Sequence[tuple[int, int]],
             edge_feats: np.ndarray, message_name: str, update_name: str,
             message_sizes: Sequence[int], update_sizes: Sequence[int],
             activation: Activation = tape.tanh) -> Tensor:
    """One round of message passing with summed aggregation.

    node_feats is (B, N, F).  Messages run M(h_src, h_dst, e) per edge, are
    summed at the destination, and every node (in-edges or not) is updated
    via U(h, m).  Edges are re-sorted internally by (dst, src, feature) so
    the float summation order, and hence the output, does not depend on the
    caller's edge ordering.
    """
    B, N, F = node_feats.data.shape
    e = len(edges)
    if e:
        ef = np.asarray(edge_feats, dtype=np.float64).reshape(e, -1)
        order = sorted(range(e), key=lambda i: (edges[i][1], edges[i][0], tuple(ef[i])))
        src = np.array([edges[i][0] for i in order], dtype=np.intp)
        dst = np.array([edges[i][1] for i in order], dtype=np.intp)
        if src.size and (src.max() >= N or dst.max() >= N or src.min() < 0 or dst.min() < 0):
            raise ValueError("edge endpoint out of range")
        ef_b = Tensor(np.broadcast_to(ef[order], (B, e, ef.shape[1])).copy())
        h_src = tape.gather_axis1(node_feats, src)
        h_dst = tape.gather_axis1(node_feats, dst)
        m_in = tape.concat([h_src, h_dst, ef_b], axis=-1)
        messages = mlp_forward(store, message_name, m_in, message_sizes, activation, None)
        agg = tape.scatter_sum_axis1(messages, dst, N)
    else:
        agg = Tensor(np.zeros((B, N, message_sizes[-1])))
    u_in = tape.concat([node_feats, agg], axis=-1)
    return mlp_forward(store, update_name, u_in, update_sizes, activation, None)


def conv_stack(store: ParamStore, name: str, x: Tensor, channels: Sequence[int],
               ksize: int = 2, activation: Activation = tape.relu) -> Tensor:
    """Stride-1 conv layers followed by a flatten to (B, -1)."""
    h = x
    for i, out_ch in enumerate(channels):
        in_ch = h.data.shape[1]
        w = store.param(f"{name}/c{i}/w", (out_ch, in_ch, ksize, ksize),
                        fan_in=in_ch * ksize * ksize)
        b = store.param(f"{name}/c{i}/b", (out_ch,))
        h = tape.conv2d(h, w, b)
        if activation is not None:
            h = activation(h)
    return tape.reshape(h, (h.data.shape[0], -1))
