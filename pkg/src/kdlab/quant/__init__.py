"""Quantization stack: formats, PTQ, norm fusion, and recovery training."""

from .formats import (
    QuantAux,
    QuantFormat,
    QuantizedTensor,
    apply_aux,
    apply_aux_columns,
    bf16_round,
    compute_aux,
    dequantize,
    e4m3_decode,
    e4m3_decode_table,
    e4m3_encode,
    fake_quant,
    pack_codes,
    parse_format,
    quant_grid,
    quantize_tensor,
    round_sig,
    unpack_codes,
)
from .fusion import column_norms, fuse_norms
from .ptq import (
    calib_hessian,
    capture_calibration,
    gptq_quantize,
    quant_error_trace,
    rtn_quantize,
)
from .qad import (
    QADResult,
    fake_quant_weights,
    make_act_transform,
    qad,
    quantized_forward,
    recovery,
    ste_fake_quant,
)
from .store import (
    QuantizedModel,
    load_quantized_model,
    quantize_model,
    save_quantized_model,
    storage_bytes,
)

__all__ = [
    "QuantAux",
    "QuantFormat",
    "QuantizedTensor",
    "QADResult",
    "QuantizedModel",
    "apply_aux",
    "apply_aux_columns",
    "bf16_round",
    "calib_hessian",
    "capture_calibration",
    "column_norms",
    "compute_aux",
    "dequantize",
    "e4m3_decode",
    "e4m3_decode_table",
    "e4m3_encode",
    "fake_quant",
    "fake_quant_weights",
    "fuse_norms",
    "gptq_quantize",
    "load_quantized_model",
    "make_act_transform",
    "pack_codes",
    "parse_format",
    "qad",
    "quant_error_trace",
    "quant_grid",
    "quantize_model",
    "quantize_tensor",
    "quantized_forward",
    "recovery",
    "round_sig",
    "rtn_quantize",
    "save_quantized_model",
    "ste_fake_quant",
    "storage_bytes",
    "unpack_codes",
]
