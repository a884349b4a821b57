import copy

import numpy as np

from ..errors import ShapeError, TapeError


class Tape:
    """Per-layer caches recorded by a train-mode forward pass."""

    def __init__(self, stack, caches, in_shape, out_shape):
        self.stack_id = id(stack)
        self.caches = caches
        self.in_shape = in_shape
        self.out_shape = out_shape


class LayerStack:
    """An ordered, named sequence of layers with a declared input shape.

    Shapes are propagated once at construction so that a mismatch is
    reported against the layer that cannot accept its input.
    """

    def __init__(self, input_shape, layers):
        self.input_shape = tuple(input_shape)
        self.layers = list(layers)
        names = [name for name, _ in self.layers]
        if len(set(names)) != len(names):
            raise ValueError("layer names must be unique")
        self.shapes = [self.input_shape]
        shape = self.input_shape
        for name, layer in self.layers:
            try:
                shape = tuple(layer.output_shape(shape))
            except ShapeError as exc:
                raise ShapeError(f"layer '{name}' ({layer.kind}): {exc}") from None
            self.shapes.append(shape)
        self.output_shape = shape

    def __len__(self):
        return len(self.layers)

    def __iter__(self):
        return iter(self.layers)

    def __repr__(self):
        body = "\n".join(f"  {name}: {layer!r} -> {shape}"
                         for (name, layer), shape in zip(self.layers, self.shapes[1:]))
        return f"LayerStack(input={self.input_shape}\n{body}\n)"

    def forward(self, x, mode="train", update_stats=True):
        """Run the stack.

        In ``"train"`` mode batchnorm uses batch statistics and a tape is
        returned for :meth:`backward`.  In ``"infer"`` mode running
        statistics are used, nothing is mutated and the tape is ``None``.
        """
        if mode not in ("train", "infer"):
            raise ValueError(f"unknown mode {mode!r}")
        if x.ndim < 2 or x.shape[0] < 1 or tuple(x.shape[1:]) != self.input_shape:
            first = self.layers[0][0] if self.layers else "<input>"
            raise ShapeError(f"layer '{first}': expected input (N, {', '.join(map(str, self.input_shape))}), "
                             f"got {tuple(x.shape)}")
        train = mode == "train"
        caches = []
        in_shape = x.shape
        for name, layer in self.layers:
            x, cache = layer.forward(x, train=train, update_stats=update_stats and train)
            if train:
                caches.append(cache)
        if not train:
            return x, None
        return x, Tape(self, caches, in_shape, x.shape)

    def __call__(self, x, mode="infer"):
        return self.forward(x, mode)[0]

    def backward(self, tape, grad_out):
        """Return ``(grad_input, {"layer.param": grad})`` for a recorded tape."""
        if tape is None or tape.stack_id != id(self) or len(tape.caches) != len(self.layers):
            raise TapeError("tape was not produced by a train-mode forward of this stack")
        if grad_out.shape != tape.out_shape:
            raise ShapeError(f"grad_out shape {grad_out.shape} != output shape {tape.out_shape}")
        grads = {}
        g = grad_out
        for (name, layer), cache in zip(reversed(self.layers), reversed(tape.caches)):
            g, pg = layer.backward(cache, g)
            for k, v in pg.items():
                grads[f"{name}.{k}"] = v
        return g, grads

    def parameters(self):
        """Trainable arrays keyed ``"layer.param"`` (live references)."""
        return {f"{name}.{k}": v for name, layer in self.layers for k, v in layer.params.items()}

    def buffers(self):
        return {f"{name}.{k}": v for name, layer in self.layers for k, v in layer.buffers.items()}

    def num_parameters(self):
        return sum(v.size for v in self.parameters().values())

    def state(self):
        state = {}
        for name, layer in self.layers:
            for k, v in layer.params.items():
                state[f"{name}.{k}"] = v
            for k, v in layer.buffers.items():
                state[f"{name}.{k}"] = v
        return state

    def load_state(self, state):
        for name, layer in self.layers:
            for d in (layer.params, layer.buffers):
                for k in d:
                    key = f"{name}.{k}"
                    if key not in state:
                        raise KeyError(f"missing entry {key!r}")
                    value = np.asarray(state[key])
                    if value.shape != d[k].shape:
                        raise ShapeError(f"entry {key!r} has shape {value.shape}, expected {d[k].shape}")
                    d[k] = value.astype(d[k].dtype, copy=True)

    def set_parameter(self, key, value):
        name, k = key.rsplit(".", 1)
        for lname, layer in self.layers:
            if lname == name:
                layer.params[k] = value
                return
        raise KeyError(key)

    def copy(self):
        return copy.deepcopy(self)

    def astype(self, dtype):
        """A deep copy with every parameter and buffer cast to ``dtype``."""
        other = self.copy()
        for _, layer in other.layers:
            layer.astype(dtype)
        return other
