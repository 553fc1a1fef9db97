"""CTC: the forward-backward loss against path enumeration, and greedy decoding."""

import itertools

import numpy as np

from madi.ctc import collapse, ctc_greedy_decode, ctc_nll

# two frames, one character plus blank, uniform: paths aa, a-, -a
lp = np.log(np.full((2, 2), 0.5))
print("loss for 'a':", ctc_nll(lp, [0]), "expected", -np.log(0.75))

# compare against summing over every frame path on a random instance
rng = np.random.default_rng(1)
logits = rng.standard_normal((5, 3))
lp = logits - np.log(np.exp(logits).sum(axis=1, keepdims=True))
labels = [0, 1]
total = sum(np.exp(sum(lp[t, s] for t, s in enumerate(path)))
            for path in itertools.product(range(3), repeat=5) if collapse(path, 2) == labels)
print("dynamic programme:", ctc_nll(lp, labels), " enumeration:", -np.log(total))

# greedy decoding merges repeats, then drops blanks
for path in ([0, 0, 2, 1], [2, 2, 2], [0, 2, 0]):
    onehot = np.log(np.eye(3)[path] + 1e-12)
    print(path, "->", ctc_greedy_decode(onehot))
