"""Static DAG of layers with one forward/backward pass per evaluation.

Nodes are added in topological order and refer to earlier nodes (or named
external inputs) by name.  A backward pass visits nodes in reverse order,
accumulating every Param's gradient exactly once per pass.
"""

import numpy as np

from ..errors import ContractError


class _Node:
    __slots__ = ("name", "layer", "inputs", "value", "grad")

    def __init__(self, name, layer, inputs):
        self.name = name
        self.layer = layer
        self.inputs = inputs
        self.value = None
        self.grad = None


class LayerGraph:
    def __init__(self):
        self._nodes = []
        self._by_name = {}
        self._input_names = []
        self._forward_done = False

    def add_input(self, name):
        if name in self._by_name:
            raise ContractError(f"duplicate node name {name!r}")
        node = _Node(name, None, ())
        self._nodes.append(node)
        self._by_name[name] = node
        self._input_names.append(name)
        return name

    def add(self, name, layer, *inputs):
        if name in self._by_name:
            raise ContractError(f"duplicate node name {name!r}")
        for i in inputs:
            if i is not None and i not in self._by_name:
                raise ContractError(f"node {name!r} refers to unknown {i!r}")
        node = _Node(name, layer, inputs)
        self._nodes.append(node)
        self._by_name[name] = node
        return name

    def params(self):
        out = []
        for node in self._nodes:
            if node.layer is not None:
                out.extend(node.layer.params())
        return out

    def describe(self) -> str:
        """Plain-text topology descriptor, one node per line."""
        lines = []
        for node in self._nodes:
            if node.layer is None:
                lines.append(f"{node.name} <- input")
            else:
                kind = type(node.layer).__name__
                lines.append(f"{node.name} <- {kind}({', '.join(node.inputs)})")
        return "\n".join(lines)

    def forward(self, inputs: dict, outputs):
        """Evaluate the graph; returns {output name: array}."""
        missing = [n for n in self._input_names if n not in inputs]
        if missing:
            raise ContractError(f"missing graph inputs: {missing}")
        for node in self._nodes:
            node.grad = None
            if node.layer is None:
                node.value = inputs[node.name]
            else:
                args = [
                    self._by_name[i].value if i is not None else None
                    for i in node.inputs
                ]
                node.value = node.layer.forward(*args)
        self._forward_done = True
        return {name: self._by_name[name].value for name in outputs}

    def backward(self, output_grads: dict):
        """Backpropagate; returns {input name: gradient or None}.

        May be called more than once after a forward (each call
        accumulates into Param.grads), which lets multi-task training
        backpropagate its loss terms separately.
        """
        if not self._forward_done:
            raise ContractError("backward called before forward")
        for node in self._nodes:
            node.grad = None
        for name, g in output_grads.items():
            self._by_name[name].grad = np.asarray(g, dtype=np.float64)
        for node in reversed(self._nodes):
            if node.layer is None or node.grad is None:
                continue
            gins = node.layer.backward(node.grad)
            for iname, gin in zip(node.inputs, gins):
                if iname is None or gin is None:
                    continue
                tgt = self._by_name[iname]
                tgt.grad = gin if tgt.grad is None else tgt.grad + gin
        return {name: self._by_name[name].grad for name in self._input_names}


def grad_check(graph: LayerGraph, inputs: dict, outputs, rng=None,
               h: float = 1e-5, guard: float = 1e-6):
    """Compare analytic parameter gradients with central finite differences.

    A fixed random linear functional of the outputs serves as the scalar
    loss.  Returns (max relative error, per-param dict).  Relative error is
    |a - n| / max(|a|, |n|, guard) so all-zero cases stay finite.
    """
    rng = rng or np.random.default_rng(0)
    outs = graph.forward(inputs, outputs)
    weights = {k: rng.standard_normal(v.shape) for k, v in outs.items()}

    def scalar_loss():
        o = graph.forward(inputs, outputs)
        return sum(float(np.sum(weights[k] * o[k])) for k in outputs)

    params = graph.params()
    for p in params:
        p.zero_grad()
    graph.forward(inputs, outputs)
    graph.backward({k: weights[k] for k in outputs})

    report = {}
    worst = 0.0
    for p in params:
        flat = p.values.ravel()
        gflat = p.grads.ravel()
        errs = np.zeros(flat.size)
        for i in range(flat.size):
            keep = flat[i]
            flat[i] = keep + h
            up = scalar_loss()
            flat[i] = keep - h
            down = scalar_loss()
            flat[i] = keep
            num = (up - down) / (2.0 * h)
            ana = gflat[i]
            errs[i] = abs(ana - num) / max(abs(ana), abs(num), guard)
        report[p.name] = float(errs.max()) if errs.size else 0.0
        worst = max(worst, report[p.name])
    return worst, report
