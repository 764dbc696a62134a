# # The autodiff tape and its gradient check
#
# Every model in the package runs on a small float64 tape. This script
# builds a tiny expression by hand, compares the tape against central
# differences, then shows the suite catching a deliberately broken op.

import numpy as np

from mmseq import kernel as K
from mmseq.gradsuite import check_op, run_suite

rng = np.random.default_rng(0)
x = K.parameter(rng.normal(size=(3, 4)))
w = K.parameter(rng.normal(size=(4, 2)))


def f():
    h = K.tanh(K.matmul(x, w))
    return K.mean(K.mul(h, h))


loss = f()
K.backward(loss)
print("loss", loss.item())

# Central differences on every coordinate of both inputs.

for name, p in (("x", x), ("w", w)):
    analytic = p.grad.copy()

    def g(t, p=p):
        saved = p.data
        p.data = t.data
        out = f()
        p.data = saved
        return out

    numeric = K.finite_diff_grad(g, K.Tensor(p.data.copy()))
    print(f"{name}: relative error {K.relative_error(analytic, numeric):.2e}")

# ## The suite
#
# Each op is checked on random shapes, and the whole multimodal loss is
# checked on sampled coordinates of every parameter. Two seeds are enough
# for a demo.

report = run_suite(range(2))
print("ok:", report["ok"], "worst op:", f"{report['worst_op']:.2e}",
      "end to end:", f"{report['end_to_end']['mllm.loss']:.2e}")

# A corrupted backward pass for matmul shows up straight away.

print("matmul with a broken gradient:", f"{check_op('matmul', 0, fault=True):.2e}")
