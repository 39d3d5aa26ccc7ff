"""Cosine-similarity logits and the multi-label BCE objective."""
from dataclasses import dataclass

import torch

EPS = 1e-8


def similarity_logits(v, z, scale=1.0):
    """scale * cos(v, z_l) for every class; v is (..., f), z is (L, f)."""
    v = torch.as_tensor(v)
    z = torch.as_tensor(z, dtype=v.dtype)
    dots = v @ z.t()
    norms = v.norm(dim=-1, keepdim=True) * z.norm(dim=-1)
    return scale * dots / (norms + EPS)


def multilabel_bce(logits, targets, reduce=True):
    """Mean over classes of the logistic loss, in the stable form.

    max(s, 0) - s*y + log(1 + exp(-|s|)). With ``reduce`` the result is also
    averaged over records; otherwise one value per record is returned.
    """
    logits = torch.as_tensor(logits)
    targets = torch.as_tensor(targets, dtype=logits.dtype)
    per = logits.clamp(min=0) - logits * targets + torch.log1p(torch.exp(-logits.abs()))
    per = per.mean(dim=-1)
    return per.mean() if reduce else per


def report_auxiliary_loss(report_embeddings, z, targets, mask, scale=1.0):
    """BCE between report embeddings and label features, over records with a report.

    ``report_embeddings`` holds rows only for records where ``mask`` is true.
    Returns zero when no record carries a report.
    """
    targets = torch.as_tensor(targets)
    if report_embeddings is None or not bool(mask.any()):
        return torch.zeros((), dtype=z.dtype)
    logits = similarity_logits(report_embeddings, z, scale)
    return multilabel_bce(logits, targets[mask])


@dataclass
class LossValue:
    image_loss: torch.Tensor
    report_loss: torch.Tensor
    lambda_report: float = 1.0

    @property
    def total(self):
        return self.image_loss + self.lambda_report * self.report_loss

    def as_floats(self):
        return {
            "image_loss": float(self.image_loss.detach()),
            "report_loss": float(self.report_loss.detach()),
            "total": float(self.total.detach()),
        }
