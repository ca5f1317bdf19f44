"""End-to-end post-training quantization of a ToyNetwork.

Per quantizable layer, in execution order:
  1. polish (allow-listed layers) and quantize the layer input,
  2. compensate the weights for the activation error,
  3. accumulate KFAC factors from output-matching gradients and quantized inputs,
  4. learn the weight rounding against the Kronecker quadratic loss.
Softmax, layernorm and the elementwise activations stay in float.
"""

from __future__ import annotations

import copy
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Literal

import numpy as np

from .compensation import DEFAULT_DAMP_RATIO, compensate
from .errors import ConfigError, FormatError
from .modelfile import ModelFile
from .network import QuantLayer, ToyNetwork, build_toy_mde, synthetic_images
from .polish import PolishFactors, calibrate_polish, polish, polished_fake_quantize
from .quant import QuantParams, fake_quantize, fit_covering, fit_log2, fit_minmax, quantize_uniform, dequantize_uniform
from .reconstruction import KfacFactors, ReconstructionConfig, accumulate_kfac, reconstruct_layer

log = logging.getLogger(__name__)

Method = Literal["full", "minmax"]
ProxyLoss = Callable[[np.ndarray], tuple[float, np.ndarray]]


@dataclass
class QuantConfig:
    weight_bits: int = 4
    act_bits: int = 8                 # 32 means activations stay in float
    epsilon: float = 95.0
    calibration_samples: int = 32
    damp_ratio: float = DEFAULT_DAMP_RATIO
    method: Method = "full"
    log2_softmax: bool = True
    polish: bool = True
    polish_layers: tuple[str, ...] | None = None   # None: the network's own allow-list
    input_act_bits: int | None = None               # bits for the raw image input; None = act_bits
    compensation: bool = True
    reconstruction: ReconstructionConfig = field(default_factory=ReconstructionConfig)

    @property
    def quantize_activations(self) -> bool:
        return self.act_bits < 32

    def to_dict(self) -> dict:
        d = asdict(self)
        d["polish_layers"] = None if self.polish_layers is None else list(self.polish_layers)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "QuantConfig":
        d = dict(d)
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown quantization keys: {sorted(unknown)}")
        if d.get("polish_layers") is not None:
            d["polish_layers"] = tuple(d["polish_layers"])
        if isinstance(d.get("reconstruction"), dict):
            d["reconstruction"] = ReconstructionConfig(**d["reconstruction"])
        return cls(**d)


@dataclass
class LayerArtifacts:
    name: str
    weight_params: QuantParams
    act_params: QuantParams | None = None
    polish: PolishFactors | None = None
    rtn_loss: float | None = None
    loss: float | None = None

    def to_dict(self) -> dict:
        return {
            "weight": self.weight_params.to_dict(),
            "act": None if self.act_params is None else self.act_params.to_dict(),
            "polish": None if self.polish is None else self.polish.to_dict(),
            "rtn_loss": self.rtn_loss,
            "loss": self.loss,
        }

    @classmethod
    def from_dict(cls, name: str, d: dict) -> "LayerArtifacts":
        return cls(
            name,
            QuantParams.from_dict(d["weight"]),
            None if d["act"] is None else QuantParams.from_dict(d["act"]),
            None if d["polish"] is None else PolishFactors.from_dict(d["polish"]),
            d.get("rtn_loss"),
            d.get("loss"),
        )


@dataclass
class Calibration:
    """Frozen activation-side parameters fitted on the float network."""

    act_bits: int
    layers: dict[str, tuple[QuantParams, PolishFactors | None]]
    softmax: dict[str, QuantParams]

    def to_dict(self) -> dict:
        return {
            "act_bits": self.act_bits,
            "layers": {
                k: {"act": p.to_dict(), "polish": None if f is None else f.to_dict()}
                for k, (p, f) in self.layers.items()
            },
            "softmax": {k: p.to_dict() for k, p in self.softmax.items()},
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Calibration":
        layers = {
            k: (QuantParams.from_dict(v["act"]), None if v["polish"] is None else PolishFactors.from_dict(v["polish"]))
            for k, v in d["layers"].items()
        }
        return cls(d["act_bits"], layers, {k: QuantParams.from_dict(v) for k, v in d["softmax"].items()})


@dataclass
class QuantizedModel:
    network: ToyNetwork
    config: QuantConfig
    layers: dict[str, LayerArtifacts]
    calibration: Calibration | None
    meta: dict = field(default_factory=dict)     # run metadata carried in the model file


def output_matching_loss(target: np.ndarray) -> ProxyLoss:
    """0.5 * ||y - target||^2, the label-free proxy used for Fisher gradients."""
    def loss(y: np.ndarray):
        r = y - target
        return 0.5 * float(np.sum(r * r)), r
    return loss


def capture_gradients(network: ToyNetwork, calibration_batches: np.ndarray, proxy_loss: ProxyLoss,
                      layers: list[str] | None = None) -> dict[str, np.ndarray]:
    """Gradients of ``proxy_loss`` w.r.t. each quantizable layer's output.

    Returns, per layer, a (positions, out) matrix: one row per sample and
    spatial position / token.  Weights are left untouched.
    """
    targets = [m for m in network.quantizable() if layers is None or m.name in layers]
    for m in targets:
        m.capture_grad = True
    try:
        y = network.forward(calibration_batches)
        _, dy = proxy_loss(y)
        network.backward(dy)
        return {m.name: m.captured_grad for m in targets}
    finally:
        for m in targets:
            m.capture_grad = False
            m.captured_grad = None


def _per_sample(x: np.ndarray) -> list[np.ndarray]:
    return [x[i : i + 1] for i in range(x.shape[0])]


def _act_hook(params: QuantParams, factors: PolishFactors | None):
    if factors is None:
        return lambda x: fake_quantize(x, params)
    return lambda x: polished_fake_quantize(x, factors, params)


def _softmax_hook(params: QuantParams):
    return lambda p: fake_quantize(p, params)


def _polished(m: QuantLayer, cfg: QuantConfig) -> bool:
    return m.policy.polish if cfg.polish_layers is None else m.name in cfg.polish_layers


def calibrate(network: ToyNetwork, images: np.ndarray, cfg: QuantConfig) -> Calibration:
    """Fit polishing factors and per-channel activation params on the float network."""
    layers = network.quantizable()
    for m in layers:
        m.capture = True
    softmax_inputs: dict[str, list[np.ndarray]] = {}
    softmaxes = network.softmaxes()
    originals = {s.name: s.out_quant for s in softmaxes}
    for s in softmaxes:
        def grab(p, name=s.name):
            softmax_inputs.setdefault(name, []).append(p)
            return p
        s.out_quant = grab
    try:
        network.forward(images)
        out = {}
        for m in layers:
            x = m.captured_input
            axis = m.channel_axis % x.ndim
            factors = None
            if cfg.method == "full" and cfg.polish and _polished(m, cfg):
                factors = calibrate_polish(_per_sample(x), cfg.epsilon, axis)
                x = polish(x, factors)
            bits = cfg.act_bits
            if m is layers[0] and cfg.input_act_bits is not None:
                bits = cfg.input_act_bits
            fit = fit_minmax if factors is None else fit_covering
            out[m.name] = (fit(x, bits, axis=axis), factors)
        sm = {}
        for name, ps in softmax_inputs.items():
            probs = np.concatenate([p.ravel() for p in ps])
            if cfg.method == "minmax":
                # plain range calibration, no log-domain attention codes
                sm[name] = fit_minmax(probs, cfg.act_bits)
            elif cfg.log2_softmax:
                sm[name] = fit_log2(probs, cfg.act_bits)
        return Calibration(cfg.act_bits, out, sm)
    finally:
        for m in layers:
            m.capture = False
            m.captured_input = m.captured_qinput = None
        for s in softmaxes:
            s.out_quant = originals[s.name]


def apply_calibration(network: ToyNetwork, calib: Calibration | None):
    """Install activation fake-quant hooks described by ``calib`` (or clear them)."""
    for m in network.quantizable():
        m.act_quant = None
        if calib is not None and m.name in calib.layers:
            m.act_quant = _act_hook(*calib.layers[m.name])
    for s in network.softmaxes():
        s.out_quant = None
        if calib is not None and s.name in calib.softmax:
            s.out_quant = _softmax_hook(calib.softmax[s.name])


def _capture_inputs(network: ToyNetwork, images: np.ndarray, names: list[str]) -> dict[str, tuple]:
    mods = [network.layer(n) for n in names]
    for m in mods:
        m.capture = True
    try:
        network.forward(images)
        return {m.name: (m.input_matrix(m.captured_input), m.input_matrix(m.captured_qinput)) for m in mods}
    finally:
        for m in mods:
            m.capture = False
            m.captured_input = m.captured_qinput = None


def rtn_weights(W: np.ndarray, bits: int) -> tuple[np.ndarray, QuantParams]:
    """Round-to-nearest per-output-channel asymmetric weights (the minmax baseline)."""
    mat = W.reshape(W.shape[0], -1)
    params = fit_minmax(mat, bits, axis=0)
    return dequantize_uniform(quantize_uniform(mat, params)).reshape(W.shape), params


def quantize_network(network: ToyNetwork, calibration_batches: np.ndarray,
                     cfg: QuantConfig | None = None,
                     progress: Callable[[str, dict], None] | None = None,
                     calibration: Calibration | None = None) -> QuantizedModel:
    """Quantize a copy of ``network``; the input network is not modified.

    ``calibration`` reuses activation parameters from an earlier
    :func:`calibrate` call with the same config and images.
    """
    cfg = cfg or QuantConfig()
    float_net = copy.deepcopy(network)
    float_net.clear_hooks()
    qnet = copy.deepcopy(float_net)
    calib = None
    if cfg.quantize_activations:
        calib = calibration or calibrate(float_net, calibration_batches, cfg)
    apply_calibration(qnet, calib)

    layers = [m for m in qnet.quantizable() if m.policy.quantize]
    artifacts: dict[str, LayerArtifacts] = {}

    if cfg.method == "minmax":
        for m in layers:
            wq, wp = rtn_weights(m.weight, cfg.weight_bits)
            m.weight = wq
            act = calib.layers[m.name][0] if calib else None
            artifacts[m.name] = LayerArtifacts(m.name, wp, act, None)
        return QuantizedModel(qnet, cfg, artifacts, calib)

    target = float_net.forward(calibration_batches)
    float_inputs = _capture_inputs(float_net, calibration_batches, [m.name for m in layers])
    proxy = output_matching_loss(target)
    for m in layers:
        X = float_inputs[m.name][0]
        X_hat = _capture_inputs(qnet, calibration_batches, [m.name])[m.name][1]
        W = m.weight_matrix
        if cfg.compensation:
            W = W + compensate(W, X.T, X_hat.T, cfg.damp_ratio)
        m.weight = W.reshape(m.weight.shape)

        g = capture_gradients(qnet, calibration_batches, proxy, [m.name])[m.name]
        factors = accumulate_kfac(g, X_hat).damped(cfg.reconstruction.fisher_damp)
        res = reconstruct_layer(W, factors, cfg.reconstruction, bits=cfg.weight_bits)
        m.weight = res.weights.reshape(m.weight.shape)

        act, pf = calib.layers[m.name] if calib else (None, None)
        artifacts[m.name] = LayerArtifacts(m.name, res.params, act, pf, res.rtn_loss, res.loss)
        info = {"rtn_loss": res.rtn_loss, "loss": res.loss, "trace": res.trace}
        log.info("layer %s: fisher loss %.4g (round-to-nearest %.4g)", m.name, res.loss, res.rtn_loss)
        if progress:
            progress(m.name, info)
    return QuantizedModel(qnet, cfg, artifacts, calib)


def calibration_images(seed: int, n: int = 32, size: int = 32) -> np.ndarray:
    """Seeded draw of ``n`` calibration scenes (a shuffle of a larger synthetic pool)."""
    pool = synthetic_images(4 * n, seed=seed + 1, size=size)
    idx = np.random.default_rng(seed).permutation(pool.shape[0])[:n]
    return pool[np.sort(idx)]


def eval_images(seed: int, n: int = 64, size: int = 32) -> np.ndarray:
    return synthetic_images(n, seed=seed + 10_000, size=size)


def save_model(qm: QuantizedModel, path: str | Path, meta: dict | None = None) -> ModelFile:
    """Write the quantized weights and every layer's parameters to a QRTD file."""
    sidecar = {
        "network": asdict(qm.network.spec),
        "config": qm.config.to_dict(),
        "layers": {k: a.to_dict() for k, a in qm.layers.items()},
        "calibration": None if qm.calibration is None else qm.calibration.to_dict(),
        "meta": {**qm.meta, **(meta or {})},
    }
    mf = ModelFile(qm.network.state_dict(), sidecar)
    mf.save(path)
    return mf


def load_model(path: str | Path) -> QuantizedModel:
    """Rebuild a :class:`QuantizedModel` (hooks installed) from a QRTD file."""
    mf = ModelFile.load(path)
    try:
        side = mf.sidecar
        net = build_toy_mde(**side["network"])
        net.load_state_dict(mf.tensors)
        cfg = QuantConfig.from_dict(side["config"])
        layers = {k: LayerArtifacts.from_dict(k, v) for k, v in side["layers"].items()}
        calib = None if side["calibration"] is None else Calibration.from_dict(side["calibration"])
    except (KeyError, TypeError) as e:
        raise FormatError(f"{path}: sidecar lacks model metadata ({e})") from None
    apply_calibration(net, calib)
    return QuantizedModel(net, cfg, layers, calib, dict(side.get("meta") or {}))
