"""Manifest-driven batch execution of per-subject processing stages.

A manifest names subjects with their input files and an ordered list of
stages. Each stage reads named artifacts (subject inputs or outputs of
earlier stages) and publishes its own outputs under its stage name. Stage
parameters go either in a ``params`` object or directly on the stage::

    {
      "output_root": "runs/demo",
      "seed": 0,
      "subjects": [{"id": "s01", "inputs": {"labels": "s01_aseg.nii.gz", "mask": "s01_mask.nii.gz"}}],
      "stages": [
        {"name": "prep", "kind": "prep-labels", "inputs": {"labels": "labels", "brain_mask": "mask"}},
        {"name": "vol", "kind": "volumetry", "inputs": {"labels": "prep"}}
      ]
    }

Stage outputs are addressed as ``<stage>`` (primary output) or
``<stage>.<output>``. Every record of the JSONL run report carries the
SHA-256 of each artifact the stage wrote.
"""
from __future__ import annotations

import hashlib
import json
import logging
import shlex
import subprocess
import time
import traceback
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

from . import labels as lab
from .ensemble import average_and_argmax, load_manifest
from .labels import DKT62, FS35, get_convention, load_labels, save_labels
from .metrics import evaluate_pair, write_metrics_csv
from .nifti import load_nifti, save_nifti
from .resample import ResampleSpec, provenance, resample_image, resample_labels
from .synth import SynthConfig, generate_case, write_case
from .volumetry import normalize_by_tiv, structure_volumes, write_tiv_csv, write_volumes_csv

log = logging.getLogger(__name__)

EXIT_OK, EXIT_INVALID, EXIT_PARTIAL = 0, 1, 2


class ManifestError(ValueError):
    """The manifest violates a structural rule and nothing was run."""


# stage kind -> (required input roles, optional input roles, output names; first is primary)
STAGE_KINDS = {
    "prep-labels": (("labels", "brain_mask"), (), ("labels",)),
    "extract-cortex": (("labels",), (), ("cortex", "parcellation")),
    "cortex-mask": (("labels",), (), ("cortex",)),
    "exec": ((), None, ("probabilities",)),
    "segmentation": (("probabilities",), (), ("labels",)),
    "parcellation": (("probabilities", "cortex"), (), ("labels",)),
    "resample": (("input",), ("like",), ("output",)),
    "evaluate": (("gt", "pred"), (), ("metrics",)),
    "volumetry": (("labels",), (), ("volumes", "tiv")),
    "synth": (("labels",), (), ("corpus",)),
}


@dataclass
class Stage:
    name: str
    kind: str
    inputs: dict[str, str]
    params: dict = field(default_factory=dict)

    @property
    def outputs(self) -> tuple[str, ...]:
        return STAGE_KINDS[self.kind][2]


@dataclass
class Subject:
    id: str
    inputs: dict[str, str]


@dataclass
class PipelineManifest:
    subjects: list[Subject]
    stages: list[Stage]
    output_root: Path
    seed: int = 0
    base_dir: Path = Path(".")

    @classmethod
    def from_dict(cls, d: dict, base_dir=".") -> "PipelineManifest":
        try:
            subjects = [Subject(str(s["id"]), dict(s.get("inputs", {}))) for s in d["subjects"]]
            stages = [
                Stage(
                    str(s["name"]),
                    str(s["kind"]),
                    dict(s.get("inputs", {})),
                    {**s.get("params", {}), **{k: v for k, v in s.items() if k not in ("name", "kind", "inputs", "params")}},
                )
                for s in d["stages"]
            ]
            root = Path(d["output_root"])
        except (KeyError, TypeError) as exc:
            raise ManifestError(f"manifest missing field: {exc}") from exc
        base = Path(base_dir)
        if not root.is_absolute():
            root = base / root
        m = cls(subjects, stages, root, int(d.get("seed", 0)), base)
        validate(m)
        return m

    @classmethod
    def load(cls, path) -> "PipelineManifest":
        path = Path(path)
        try:
            d = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise ManifestError(f"manifest is not valid JSON: {exc}") from exc
        return cls.from_dict(d, path.parent)


def _resolve(ref: str, known: dict[str, tuple[str, str]]) -> tuple[str, str]:
    """Artifact reference -> (producer stage or '', output name)."""
    if ref in known:
        return known[ref]
    raise ManifestError(f"unknown artifact {ref!r}")


def validate(m: PipelineManifest) -> None:
    """Structural checks; raises :class:`ManifestError`.

    Stages only see artifacts published before them, so the stage list is
    acyclic by construction. A parcellation stage needs a segmentation stage
    upstream and its cortex input must be derived from that segmentation.
    """
    if not m.subjects:
        raise ManifestError("no subjects")
    ids = [s.id for s in m.subjects]
    if len(set(ids)) != len(ids):
        raise ManifestError("duplicate subject ids")
    input_keys = set.intersection(*(set(s.inputs) for s in m.subjects))
    known: dict[str, tuple[str, str]] = {k: ("", k) for k in input_keys}
    derived_from: dict[str, set[str]] = {}  # stage -> upstream stage names
    kinds: dict[str, str] = {}

    for st in m.stages:
        if st.kind not in STAGE_KINDS:
            raise ManifestError(f"stage {st.name!r}: unknown kind {st.kind!r}")
        if st.name in kinds or st.name in input_keys:
            raise ManifestError(f"duplicate artifact/stage name {st.name!r}")
        required, optional, _ = STAGE_KINDS[st.kind]
        missing = [r for r in required if r not in st.inputs]
        if missing:
            raise ManifestError(f"stage {st.name!r}: missing inputs {missing}")
        if optional is not None:
            extra = set(st.inputs) - set(required) - set(optional)
            if extra:
                raise ManifestError(f"stage {st.name!r}: unexpected inputs {sorted(extra)}")
        upstream: set[str] = set()
        for role, ref in st.inputs.items():
            producer, _ = _resolve(ref, known)
            if producer:
                upstream |= {producer} | derived_from[producer]
        if st.kind == "exec" and "command" not in st.params:
            raise ManifestError(f"stage {st.name!r}: exec stages need a 'command'")
        if st.kind == "parcellation":
            segs = [s for s in upstream if kinds.get(s) == "segmentation"]
            cortex_producer, _ = _resolve(st.inputs["cortex"], known)
            cortex_chain = ({cortex_producer} | derived_from.get(cortex_producer, set())) if cortex_producer else set()
            if not any(kinds.get(s) == "segmentation" for s in cortex_chain) or not segs:
                raise ManifestError(
                    f"stage {st.name!r}: parcellation must follow a segmentation stage and take "
                    "its cortex input from that segmentation"
                )
        if st.kind == "resample" and "like" not in st.inputs and "target_spacing" not in st.params:
            raise ManifestError(f"stage {st.name!r}: resample needs 'like' or 'target_spacing'")
        kinds[st.name] = st.kind
        derived_from[st.name] = upstream
        for k, out in enumerate(st.outputs):
            known[f"{st.name}.{out}"] = (st.name, out)
            if k == 0:
                known[st.name] = (st.name, out)


# ---------------------------------------------------------------------------
# Execution
# ---------------------------------------------------------------------------


def sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _convention(stage: Stage, default):
    name = stage.params.get("convention")
    return get_convention(name) if name else default


def _run_stage(st: Stage, inputs: dict[str, Path], out_dir: Path, subject: str, subject_index: int,
               seed: int) -> dict[str, Path]:
    out_dir.mkdir(parents=True, exist_ok=True)
    p = st.params
    stem = out_dir / st.name
    if st.kind == "prep-labels":
        labels = load_labels(inputs["labels"], _convention(st, None))
        out = lab.relabel_unassigned_to_csf(labels, load_nifti(inputs["brain_mask"]))
        path = stem.with_suffix(".nii.gz")
        save_labels(out, path)
        return {"labels": path}
    if st.kind == "extract-cortex":
        labels = load_labels(inputs["labels"], _convention(st, None))
        cortex, parc = lab.extract_cortex(labels)
        paths = {"cortex": out_dir / f"{st.name}_cortex.nii.gz", "parcellation": out_dir / f"{st.name}_parcellation.nii.gz"}
        save_labels(cortex, paths["cortex"])
        save_labels(parc, paths["parcellation"])
        return paths
    if st.kind == "cortex-mask":
        labels = load_labels(inputs["labels"], _convention(st, None))
        out = labels.with_data(lab.parcels_to_cortex(labels.data), FS35)
        path = stem.with_suffix(".nii.gz")
        save_labels(out, path)
        return {"cortex": path}
    if st.kind == "exec":
        fmt = {"subject": subject, "out_dir": str(out_dir), "seed": seed, **{k: str(v) for k, v in inputs.items()}}
        cmd = [part.format(**fmt) for part in shlex.split(st.params["command"])]
        subprocess.run(cmd, check=True, cwd=out_dir, capture_output=True)
        manifest = out_dir / st.params.get("expects", "probabilities.json").format(**fmt)
        if not manifest.exists():
            raise FileNotFoundError(f"exec stage did not produce {manifest}")
        return {"probabilities": manifest}
    if st.kind in ("segmentation", "parcellation"):
        default = FS35 if st.kind == "segmentation" else DKT62
        seg = average_and_argmax(load_manifest(inputs["probabilities"]), _convention(st, default))
        path = stem.with_suffix(".nii.gz")
        save_labels(seg, path)
        return {"labels": path}
    if st.kind == "resample":
        if "like" in inputs:
            ref = load_nifti(inputs["like"])
            spec_kw = {"target_grid": (ref.dims, ref.affine)}
        else:
            spec_kw = {"target_spacing": tuple(p["target_spacing"])}
        path = stem.with_suffix(".nii.gz")
        if p.get("type", "labels") == "labels":
            spec = ResampleSpec(**spec_kw, label_mode=p.get("label_mode", "one-hot-linear"))
            labels = load_labels(inputs["input"], _convention(st, None))
            save_labels(resample_labels(labels, spec), path, descrip=provenance(spec, "labels"))
        else:
            spec = ResampleSpec(**spec_kw, image_order=p.get("image_order", "cubic"))
            save_nifti(resample_image(load_nifti(inputs["input"]), spec), path, descrip=provenance(spec, "image"))
        return {"output": path}
    if st.kind == "evaluate":
        mode = p.get("mode", "whole-brain")
        conv = _convention(st, FS35 if mode == "whole-brain" else DKT62)
        excl = lab.evaluation_label_set(mode, (conv, lab.DK68 if mode == "cortex" else conv), p.get("exclude"))
        rep = evaluate_pair(load_labels(inputs["gt"], conv), load_labels(inputs["pred"], conv), excl, subject)
        path = stem.with_suffix(".csv")
        write_metrics_csv([rep], path)
        return {"metrics": path}
    if st.kind == "volumetry":
        labels = load_labels(inputs["labels"], _convention(st, None))
        rep = normalize_by_tiv(structure_volumes(labels, subject, p.get("tiv_exclude", ())), p.get("tiv_override"))
        paths = {"volumes": out_dir / f"{st.name}_volumes.csv", "tiv": out_dir / f"{st.name}_tiv.csv"}
        write_volumes_csv([rep], paths["volumes"])
        write_tiv_csv([rep], paths["tiv"])
        return paths
    if st.kind == "synth":
        cfg = SynthConfig.from_dict({**p.get("config", {}), "seed": seed})
        labels = load_labels(inputs["labels"], _convention(st, None))
        corpus_dir = out_dir / st.name
        written = []
        for r in range(cfg.replication):
            written += write_case(generate_case(labels, cfg, subject_index, r, subject), corpus_dir)
        return {"corpus": corpus_dir, **{f"file:{w.name}": w for w in written}}
    raise ManifestError(f"unknown stage kind {st.kind}")


def run_subject(m: PipelineManifest, index: int) -> list[dict]:
    """Run every stage for one subject; the first failure skips the rest."""
    subj = m.subjects[index]
    out_dir = m.output_root / subj.id
    artifacts: dict[str, Path] = {}
    for k, v in subj.inputs.items():
        pth = Path(v)
        artifacts[k] = pth if pth.is_absolute() else m.base_dir / pth
    records = []
    failed = None
    for st in m.stages:
        rec = {"subject": subj.id, "stage": st.name, "kind": st.kind}
        if failed:
            rec.update(status="skipped", reason=f"earlier stage {failed!r} failed")
            records.append(rec)
            continue
        t0 = time.perf_counter()
        try:
            ins = {role: artifacts[ref] for role, ref in st.inputs.items()}
            for role, pth in ins.items():
                if not pth.exists():
                    raise FileNotFoundError(f"input {role}={pth} does not exist")
            outs = _run_stage(st, ins, out_dir, subj.id, index, m.seed)
            hashes = {}
            artifacts[st.name] = outs[st.outputs[0]]
            for name, pth in outs.items():
                if not name.startswith("file:"):
                    artifacts[f"{st.name}.{name}"] = pth
                if pth.is_file():
                    hashes[str(pth.relative_to(m.output_root))] = sha256(pth)
            rec.update(status="ok", artifacts=hashes)
        except Exception as exc:  # subject isolation: record and stop this subject only
            failed = st.name
            rec.update(status="failed", error=f"{type(exc).__name__}: {exc}")
            log.debug("%s/%s failed\n%s", subj.id, st.name, traceback.format_exc())
        rec["seconds"] = round(time.perf_counter() - t0, 4)
        records.append(rec)
    return records


@dataclass
class RunReport:
    records: list[dict]
    path: Path

    @property
    def failed_subjects(self) -> list[str]:
        return sorted({r["subject"] for r in self.records if r["status"] == "failed"})

    @property
    def exit_code(self) -> int:
        return EXIT_PARTIAL if self.failed_subjects else EXIT_OK


def _subject_job(args):
    m, i = args
    return run_subject(m, i)


def run_pipeline(m: PipelineManifest, jobs: int = 1) -> RunReport:
    """Execute all subjects (in a process pool when ``jobs > 1``) and write the JSONL report."""
    m.output_root.mkdir(parents=True, exist_ok=True)
    idx = range(len(m.subjects))
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            per_subject = list(pool.map(_subject_job, [(m, i) for i in idx]))
    else:
        per_subject = [run_subject(m, i) for i in idx]
    records = [r for recs in per_subject for r in recs]
    path = m.output_root / "run_report.jsonl"
    with path.open("w") as fh:
        for r in records:
            fh.write(json.dumps(r, sort_keys=True) + "\n")
    return RunReport(records, path)
