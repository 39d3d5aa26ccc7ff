"""Soft gating over experts and convex fusion of their class tokens."""
import torch
from torch import nn

from .errors import NumericError, PreconditionError, ShapeError


def reduce_gate_input(query_outputs, projections):
    """Mean-pool each expert's query outputs over views and queries, project, concatenate.

    ``query_outputs[k]`` has shape (B, N, Q, f_k); ``projections[k]`` maps
    f_k to the fusion width. Expert order fixes the layout.
    """
    if not query_outputs:
        raise PreconditionError("at least one expert is required")
    pooled = [proj(q.mean(dim=(-3, -2))) for q, proj in zip(query_outputs, projections)]
    return torch.cat(pooled, dim=-1)


class GateNetwork(nn.Module):
    """Affine map to K logits followed by a softmax.

    Starts at zero so every expert initially gets weight 1/K.
    """

    def __init__(self, num_experts, fusion_dim):
        super().__init__()
        self.num_experts = num_experts
        self.linear = nn.Linear(num_experts * fusion_dim, num_experts)
        nn.init.zeros_(self.linear.weight)
        nn.init.zeros_(self.linear.bias)

    def logits(self, gate_input):
        if gate_input.shape[-1] != self.linear.in_features:
            raise ShapeError(f"gate expects width {self.linear.in_features}, got {gate_input.shape[-1]}")
        return self.linear(gate_input)

    def forward(self, gate_input):
        return gate(self.logits(gate_input))


def gate(logits):
    """Softmax over the last axis; refuses non-finite logits."""
    logits = torch.as_tensor(logits)
    if not torch.isfinite(logits).all():
        raise NumericError("gate logits are not finite")
    return torch.softmax(logits, dim=-1)


def fuse(weights, class_tokens):
    """v = sum_k g_k a_k for weights (..., K) and class tokens (..., K, f)."""
    weights = torch.as_tensor(weights)
    class_tokens = torch.as_tensor(class_tokens)
    if weights.shape[-1] != class_tokens.shape[-2]:
        raise ShapeError(f"{weights.shape[-1]} gate weights for {class_tokens.shape[-2]} class tokens")
    return (weights.unsqueeze(-1) * class_tokens).sum(dim=-2)
