"""CTC on hand-made logits: loss, greedy decoding and CER."""

import numpy as np
import torch

from textssl.dataset import Charset
from textssl.ocr import cer, ctc_loss, edit_operations, greedy_decode

cs = Charset.from_texts(["cab"])
print("symbols", cs.symbols, "blank index", cs.blank_index)

# uniform logits: every path equally likely
print("T=1, target 'a':", ctc_loss(torch.zeros(1, 2), [0]).item())
print("T=2, target 'a':", ctc_loss(torch.zeros(2, 2), [0]).item())

# a confident path "c c - a b -" decodes to "cab"
c, a, b = cs.encode("cab")
path = [c, c, cs.blank_index, a, b, cs.blank_index]
logits = np.full((len(path), cs.num_classes), -5.0)
logits[np.arange(len(path)), path] = 5.0
target = cs.encode("cab")
print("loss on its own transcription", ctc_loss(torch.tensor(logits), target).item())
print("decoded:", repr(greedy_decode(logits, cs)))

for hyp, ref in [("kitten", "sitting"), ("cab", "cab"), ("", "cab")]:
    dist, sub, ins, dele = edit_operations(hyp, ref)
    print(f"{hyp!r:>10} vs {ref!r:<10} CER {cer(hyp, ref):.3f}  (S={sub} I={ins} D={dele})")
