"""Bit-exact persistence: the MFT1 binary tensor file, scene documents as
JSON plus referenced tensor files, and evaluation reports as JSON/CSV.

MFT1 layout: magic "MFT1", dtype byte (0x01 = float32), rank byte, two zero
padding bytes, then rank u64 little-endian dims, then row-major float32
little-endian data. Total length must equal 8 + 8*rank + 4*product(dims).
"""

import csv
import json
import os
import struct

import numpy as np

from .instances import GroundTruthInstance, InstancePrediction, Scene
from .mask_head import PARAM_COUNT, MaskHeadParams

MAGIC = b"MFT1"
DTYPE_F32 = 0x01


class FormatError(ValueError):
    """A file does not match its declared format."""


class TensorFormatError(FormatError):
    pass


class SceneFormatError(FormatError):
    pass


def write_tensor(path, tensor):
    tensor = np.ascontiguousarray(np.asarray(tensor, dtype=np.float32))
    if tensor.ndim > 255:
        raise TensorFormatError(f"tensor rank {tensor.ndim} exceeds the 1-byte rank field")
    header = MAGIC + bytes((DTYPE_F32, tensor.ndim, 0, 0))
    dims = struct.pack(f"<{tensor.ndim}Q", *tensor.shape)
    payload = tensor.astype("<f4", copy=False).tobytes(order="C")
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(dims)
        fh.write(payload)


def read_tensor(path):
    with open(path, "rb") as fh:
        buf = fh.read()
    if len(buf) < 8:
        raise TensorFormatError(
            f"{path}: truncated header, expected at least 8 bytes, got {len(buf)}"
        )
    if buf[:4] != MAGIC:
        raise TensorFormatError(f"{path}: bad magic {buf[:4]!r} at offset 0")
    if buf[4] != DTYPE_F32:
        raise TensorFormatError(f"{path}: unknown dtype 0x{buf[4]:02X} at offset 4")
    rank = buf[5]
    if buf[6] != 0 or buf[7] != 0:
        raise TensorFormatError(f"{path}: nonzero padding bytes at offsets 6-7")
    dims_end = 8 + 8 * rank
    if len(buf) < dims_end:
        raise TensorFormatError(
            f"{path}: truncated dims at offset 8, expected {dims_end} bytes, got {len(buf)}"
        )
    dims = struct.unpack_from(f"<{rank}Q", buf, 8)
    count = 1
    for d in dims:
        count *= d
    expected = dims_end + 4 * count
    if len(buf) != expected:
        raise TensorFormatError(
            f"{path}: length mismatch for dims {list(dims)}, "
            f"expected {expected} bytes, got {len(buf)}"
        )
    data = np.frombuffer(buf, dtype="<f4", count=count, offset=dims_end)
    return data.reshape(dims).astype(np.float32, copy=True)


def _box_to_list(box):
    return [float(v) for v in np.asarray(box, dtype=np.float32)]


def _tensor_name(stem, suffix):
    return f"{stem}_{suffix}.mft"


def write_scene(path, scene):
    """Write a scene document at path with its tensors alongside it.

    Tensor files share the document's stem, so documents in one directory
    must use distinct stems.
    """
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    stem = os.path.splitext(os.path.basename(path))[0]

    def dump(suffix, tensor):
        name = _tensor_name(stem, suffix)
        write_tensor(os.path.join(directory, name), tensor)
        return name

    doc = {
        "scene_id": int(scene.scene_id),
        "seed": int(scene.seed),
        "height": int(scene.height),
        "width": int(scene.width),
        "mask_features": dump("mask_features", scene.mask_features),
        "color_map": dump("color_map", scene.color_map),
        "ground_truths": [],
        "predictions": [],
    }
    for i, gt in enumerate(scene.ground_truths):
        doc["ground_truths"].append({
            "class_id": int(gt.class_id),
            "box": _box_to_list(gt.box),
            "mask": dump(f"gt{i}_mask", gt.mask),
        })
    for j, pred in enumerate(scene.predictions):
        entry = {
            "class_id": int(pred.class_id),
            "score": float(pred.score),
            "box": _box_to_list(pred.box),
            "mask": dump(f"pred{j}_mask", pred.mask),
            "head_params": None,
        }
        if pred.head_params is not None:
            entry["head_params"] = dump(f"pred{j}_head", pred.head_params.to_flat())
        doc["predictions"].append(entry)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=2)
        fh.write("\n")


def _load_ref(directory, name, context):
    if not isinstance(name, str):
        raise SceneFormatError(f"{context}: tensor reference must be a string, got {name!r}")
    full = os.path.join(directory, name)
    if not os.path.exists(full):
        raise SceneFormatError(f"{context}: referenced tensor {name} does not exist")
    return read_tensor(full)


def _check_shape(arr, shape, context):
    if arr.shape != shape:
        raise SceneFormatError(f"{context}: tensor shape {arr.shape}, expected {shape}")
    return arr


def _parse_box(raw, context):
    if not isinstance(raw, list) or len(raw) != 4:
        raise SceneFormatError(f"{context}: box must be a list of 4 numbers, got {raw!r}")
    box = np.asarray(raw, dtype=np.float32)
    if not (box[0] < box[2] and box[1] < box[3]):
        raise SceneFormatError(f"{context}: degenerate box {raw}")
    return box


def read_scene(path):
    directory = os.path.dirname(os.path.abspath(path))
    try:
        with open(path, "r", encoding="utf-8") as fh:
            doc = json.load(fh)
    except json.JSONDecodeError as exc:
        raise SceneFormatError(f"{path}: invalid JSON: {exc}") from exc
    if not isinstance(doc, dict):
        raise SceneFormatError(f"{path}: top level must be an object")
    try:
        height = int(doc["height"])
        width = int(doc["width"])
        scene = Scene(
            scene_id=int(doc["scene_id"]),
            seed=int(doc["seed"]),
            height=height,
            width=width,
            mask_features=_check_shape(
                _load_ref(directory, doc["mask_features"], f"{path}: mask_features"),
                (height, width, 8), f"{path}: mask_features"),
            color_map=_check_shape(
                _load_ref(directory, doc["color_map"], f"{path}: color_map"),
                (height, width, 3), f"{path}: color_map"),
        )
    except KeyError as exc:
        raise SceneFormatError(f"{path}: missing key {exc}") from exc
    for i, raw in enumerate(doc.get("ground_truths", [])):
        context = f"{path}: ground_truths[{i}]"
        try:
            mask = _check_shape(_load_ref(directory, raw["mask"], context),
                                (height, width), context)
            scene.ground_truths.append(GroundTruthInstance(
                class_id=int(raw["class_id"]),
                box=_parse_box(raw["box"], context),
                mask=mask,
            ))
        except KeyError as exc:
            raise SceneFormatError(f"{context}: missing key {exc}") from exc
    for j, raw in enumerate(doc.get("predictions", [])):
        context = f"{path}: predictions[{j}]"
        try:
            mask = _check_shape(_load_ref(directory, raw["mask"], context),
                                (height, width), context)
            head = None
            if raw.get("head_params") is not None:
                flat = _load_ref(directory, raw["head_params"], context)
                if flat.shape != (PARAM_COUNT,):
                    raise SceneFormatError(
                        f"{context}: head_params shape {flat.shape}, "
                        f"expected ({PARAM_COUNT},)"
                    )
                head = MaskHeadParams.from_flat(flat)
            score = float(raw["score"])
            if not 0.0 <= score <= 1.0:
                raise SceneFormatError(f"{context}: score {score} outside [0, 1]")
            scene.predictions.append(InstancePrediction(
                class_id=int(raw["class_id"]),
                score=score,
                box=_parse_box(raw["box"], context),
                mask=mask,
                head_params=head,
            ))
        except KeyError as exc:
            raise SceneFormatError(f"{context}: missing key {exc}") from exc
    return scene


def _task_dict(task, metrics):
    out = {}
    if metrics in ("ap", "both"):
        out["ap"] = task.ap
        out["ap50"] = task.ap50
        out["per_class_ap"] = {str(c): task.per_class_ap[c]
                               for c in sorted(task.per_class_ap)}
        out["true_positives"] = {str(c): task.true_positives[c]
                                 for c in sorted(task.true_positives)}
        out["predictions_per_class"] = {str(c): task.predictions_per_class[c]
                                        for c in sorted(task.predictions_per_class)}
    if metrics in ("fg-ap", "both"):
        out["fg_ap"] = task.fg_ap
    return out


def write_eval_report(report, json_path, csv_path, metrics="both",
                      allocation=None):
    """Serialize an EvalReport as a JSON document and a long-format CSV
    (columns task, metric, class_id, value). metrics selects 'ap', 'fg-ap',
    or 'both'; allocation, when given, is a dict recorded verbatim in the
    JSON document."""
    if metrics not in ("ap", "fg-ap", "both"):
        raise ValueError(f"write_eval_report: bad metrics selection {metrics!r}")
    doc = {
        "detection": _task_dict(report.detection, metrics),
        "segmentation": _task_dict(report.segmentation, metrics),
    }
    if allocation is not None:
        doc["allocation"] = allocation
    with open(json_path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=2)
        fh.write("\n")
    with open(csv_path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["task", "metric", "class_id", "value"])
        for task_name in ("detection", "segmentation"):
            task = doc[task_name]
            for metric in ("ap", "ap50", "fg_ap"):
                if metric in task:
                    writer.writerow([task_name, metric, "", repr(task[metric])])
            for c in task.get("per_class_ap", {}):
                writer.writerow([task_name, "class_ap", c, repr(task["per_class_ap"][c])])
            for c in task.get("true_positives", {}):
                writer.writerow([task_name, "true_positives", c, task["true_positives"][c]])
            for c in task.get("predictions_per_class", {}):
                writer.writerow([task_name, "predictions", c,
                                 task["predictions_per_class"][c]])
