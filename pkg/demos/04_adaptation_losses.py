"""The character-level adaptation losses on hand-built feature sets."""

import numpy as np

from madi import adaptation as da
from madi.autodiff import Tensor

# frame labels come from the CTC argmax; blank frames carry no character
log_probs = np.log(np.array([[0.7, 0.2, 0.1], [0.1, 0.1, 0.8], [0.6, 0.3, 0.1], [0.2, 0.7, 0.1]]))
labels = da.assign_frame_labels(log_probs)
frames = Tensor(np.arange(8.0).reshape(4, 2))
sets = da.gather_character_features(frames, labels, blank=2)
print("frame labels", labels, "-> sets", {c: v.data.tolist() for c, v in sets.items()})

# MMD between two singletons at one kernel width: 2 - 2/e
print("MMD^2({0},{2}), s2=2:", da.mmd_squared([[0.0]], [[2.0]], [2.0]).item())

rng = np.random.default_rng(0)
src = {c: Tensor(rng.normal(c, 1.0, (20, 2))) for c in range(3)}
near = {c: Tensor(rng.normal(c + 0.1, 1.0, (20, 2))) for c in range(3)}
far = {c: Tensor(rng.normal(c + 3.0, 1.0, (20, 2))) for c in range(3)}
print("matching loss, small shift:", round(da.matching_loss(src, near)[0].item(), 4),
      " large shift:", round(da.matching_loss(src, far)[0].item(), 4))


def cents(vectors):
    chars = sorted(vectors)
    return da.CentroidSet(chars, Tensor(np.array([vectors[c] for c in chars], float)), [1] * len(chars))


# contrast between target and augmented centroids; orthogonal characters at tau=1
e = {0: [1.0, 0.0], 1: [0.0, 1.0]}
print("NT-Xent hand case:", da.discrimination_loss(cents(e), cents(e), 1.0)[0].item(), "=", -np.log(np.e / (np.e + 2)))
# characters that crowd together cost more
crowded = {0: [1.0, 0.0], 1: [0.9, 0.1]}
print("crowded centroids:", da.discrimination_loss(cents(crowded), cents(crowded), 0.1)[0].item())
print("spread centroids: ", da.discrimination_loss(cents(e), cents(e), 0.1)[0].item())

print("total, alpha=beta=5:", da.total_loss(1.0, 0.2, 0.3, 5.0, 5.0))
