"""Structured findings, instruction prompts and five-section radiology reports.

The deterministic oracle generator stands in for a fine-tuned language model:
it votes over the retrieved territories and fills the same report layout a
model would be trained to produce. :func:`llm_generate` serves the identical
prompt to an external text-completion endpoint instead.
"""
from __future__ import annotations

import json
import os
import re
import time
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence

import httpx

from .data import (
    LABEL_TO_TERRITORY,
    LABELS,
    TERRITORY_TO_LABEL,
    InfarctionType,
    RegistryEntry,
    Severity,
    StructuredFinding,
    Territory,
    TerritoryLabel,
)
from .retrieval import RetrievalResult

SEVERITY_TEXT = {Severity.STRONG: "strong", Severity.MILD: "mild"}
INFARCTION_TEXT = {
    InfarctionType.LARGE_VASCULAR_TERRITORIAL: "large vascular territorial",
    InfarctionType.WEDGE_SHAPED_VASCULAR_TERRITORIAL: "wedge-shaped vascular territorial",
    InfarctionType.SMALL_LACUNE: "small lacune",
    InfarctionType.SMALL_STRIATO_CAPSULAR: "small striatocapsular",
    InfarctionType.SMALL_DIFFUSION_RESTRICTION: "small",
}
TERRITORY_TEXT = {
    Territory.ANTERIOR_CIRCULATION: "anterior circulation",
    Territory.POSTERIOR_CIRCULATION: "posterior circulation",
    Territory.DEEP_GRAY_MATTER: "deep gray matter",
}
NORMAL_FINDING = "There is no evidence of diffusion restriction."
IMPRESSION_ACUTE = "Acute infarction"
IMPRESSION_NORMAL = "No acute infarction"

INSTRUCTION = "Provide proper clinical report based on Registry and Similar patient reports."
DEFAULT_M = 5

# fixed tie order for the oracle vote
_VOTE_ORDER = {label: i for i, label in enumerate(LABELS)}


class ReportParseError(ValueError):
    """Generated text could not be split into report sections; keeps the raw text."""

    def __init__(self, message: str, raw: str):
        super().__init__(message)
        self.raw = raw


class LLMUnavailable(RuntimeError):
    """Transport failure or timeout talking to the completion endpoint; safe to retry."""


def render_finding(f: StructuredFinding) -> str:
    if f.is_normal:
        return NORMAL_FINDING
    return (f"There is {SEVERITY_TEXT[f.severity_class]} {INFARCTION_TEXT[f.infarction_type]} "
            f"diffusion restriction in the {TERRITORY_TEXT[f.territory]} territory.")


def territory_sentence(label: TerritoryLabel) -> str:
    """Territory-only findings line used in generated reports."""
    if label is TerritoryLabel.NORMAL:
        return NORMAL_FINDING
    return f"There is a diffusion restriction in the {TERRITORY_TEXT[LABEL_TO_TERRITORY[label]]} territory."


def _nihss_text(nihss: Optional[float]) -> str:
    return "N/A" if nihss is None else f"{float(nihss):.1f}"


def registry_line(reg: RegistryEntry) -> str:
    parts = [f"{reg.age}-year-old", reg.sex]
    if reg.presentation:
        parts.append(reg.presentation)
    parts.append(_nihss_text(reg.nihss))
    parts.extend(reg.past_medical_history)
    return ", ".join(parts) + ","


@dataclass(frozen=True)
class PromptInstance:
    registry: RegistryEntry
    retrieved: tuple[tuple[str, float], ...]
    instruction_text: str

    @property
    def m(self) -> int:
        return len(self.retrieved)


def render_prompt(registry: RegistryEntry, retrieval: RetrievalResult, m: int = DEFAULT_M) -> PromptInstance:
    """Assemble the instruction prompt from a registry entry and the top-``m`` hits."""
    if m < 1:
        raise ValueError("m must be >= 1")
    if len(retrieval.hits) < m:
        raise ValueError(f"prompt needs {m} retrieved reports, got {len(retrieval.hits)}")
    hits = retrieval.hits[:m]
    if any(h.finding is None for h in hits):
        raise ValueError("retrieved hits carry no structured finding")
    retrieved = tuple((render_finding(h.finding), h.similarity) for h in hits)
    lines = ["<s>", "[INST]", INSTRUCTION, f"### Registry: {registry_line(registry)}", "",
             "### Similar patient reports:"]
    lines += [f"[{i}] {text}" for i, (text, _) in enumerate(retrieved, 1)]
    lines.append("[/INST]")
    return PromptInstance(registry, retrieved, "\n".join(lines))


@dataclass(frozen=True)
class RadiologyReport:
    clinical_presentation: str
    nihss: str
    past_medical_history: str
    findings: str
    impression: str
    similar_reports: tuple[tuple[int, float, str], ...] = field(default_factory=tuple)

    def to_text(self) -> str:
        lines = [
            f"Clinical Presentation: {self.clinical_presentation}",
            f"NIHSS: {self.nihss}",
            f"Past Medical History: {self.past_medical_history}",
            f"Findings: {self.findings}",
            f"Impression: {self.impression}",
        ]
        if self.similar_reports:
            lines += ["", "### Similar patient reports:"]
            for rank, sim, text in self.similar_reports:
                lines += [f"[{rank}] Similarity Score : {sim:.2f}", text]
        return "\n".join(lines) + "\n"

    def to_dict(self) -> dict:
        return {
            "clinical_presentation": self.clinical_presentation,
            "nihss": self.nihss,
            "past_medical_history": self.past_medical_history,
            "findings": self.findings,
            "impression": self.impression,
            "similar_reports": [{"rank": r, "similarity": round(s, 2), "finding": t}
                                for r, s, t in self.similar_reports],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RadiologyReport":
        sims = tuple((int(e["rank"]), float(e["similarity"]), e["finding"]) for e in d.get("similar_reports", ()))
        return cls(d["clinical_presentation"], d["nihss"], d["past_medical_history"], d["findings"],
                   d["impression"], sims)


def clinical_presentation(reg: RegistryEntry) -> str:
    if reg.presentation:
        return f"A {reg.age}-year-old {reg.sex} patient with {reg.presentation}."
    return f"A {reg.age}-year-old {reg.sex} patient."


def vote_territory(hits: Sequence) -> TerritoryLabel:
    """Majority label; ties by larger summed similarity, then anterior < deep gray < posterior < normal."""
    counts = Counter(h.label for h in hits)
    sums: dict[TerritoryLabel, float] = {}
    for h in hits:
        sums[h.label] = sums.get(h.label, 0.0) + h.similarity
    return min(counts, key=lambda l: (-counts[l], -sums[l], _VOTE_ORDER[l]))


def generate_report_oracle(prompt: PromptInstance, retrieval: RetrievalResult) -> RadiologyReport:
    label = vote_territory(retrieval.hits[:prompt.m])
    reg = prompt.registry
    return RadiologyReport(
        clinical_presentation=clinical_presentation(reg),
        nihss=_nihss_text(reg.nihss),
        past_medical_history=", ".join(reg.past_medical_history),
        findings=territory_sentence(label),
        impression=IMPRESSION_NORMAL if label is TerritoryLabel.NORMAL else IMPRESSION_ACUTE,
        similar_reports=tuple((i, sim, text) for i, (text, sim) in enumerate(prompt.retrieved, 1)),
    )


# ---------------------------------------------------------------------------
# parsing

_SECTIONS = (
    ("clinical_presentation", "Clinical Presentation"),
    ("nihss", "NIHSS"),
    ("past_medical_history", "Past Medical History"),
    ("findings", "Findings"),
    ("impression", "Impression"),
)
_SIM_RE = re.compile(r"^\[(\d+)\]\s*Similarity Score\s*:\s*(-?[0-9]*\.?[0-9]+)\s*$")


def parse_report(text: str) -> RadiologyReport:
    """Split generated text into the five sections and any appended similar reports."""
    values: dict[str, str] = {}
    lines = [ln.strip() for ln in text.splitlines()]
    for key, header in _SECTIONS:
        pat = re.compile(rf"^{re.escape(header)}\s*:\s*(.*)$")
        for ln in lines:
            m = pat.match(ln)
            if m:
                values[key] = m.group(1).strip()
                break
    missing = [h for k, h in _SECTIONS if k not in values]
    if missing:
        raise ReportParseError(f"generated report lacks section(s): {', '.join(missing)}", text)
    # tolerate stray punctuation after the short fields
    values["nihss"] = values["nihss"].rstrip(".").strip()
    values["past_medical_history"] = values["past_medical_history"].rstrip(",").strip()

    similar: list[tuple[int, float, str]] = []
    current: Optional[list] = None
    for ln in lines:
        m = _SIM_RE.match(ln)
        if m:
            current = [int(m.group(1)), float(m.group(2)), []]
            similar.append(current)
        elif current is not None and ln and not ln.startswith("###"):
            current[2].append(ln)
    sims = tuple((r, s, " ".join(t)) for r, s, t in similar)
    return RadiologyReport(similar_reports=sims, **values)


def parse_report_territory(report: RadiologyReport) -> TerritoryLabel:
    text = report.findings
    if not text:
        raise ValueError("report has an empty findings section")
    matches = [TerritoryLabel.NORMAL] if "no evidence of diffusion restriction" in text else []
    for terr, surface in TERRITORY_TEXT.items():
        if surface in text:
            matches.append(TERRITORY_TO_LABEL[terr])
    if len(matches) != 1:
        found = ", ".join(m.value for m in matches) or "none"
        raise ValueError(f"findings must name exactly one territory, found: {found}")
    return matches[0]


def report_territory_acc1(reports: Sequence[RadiologyReport], ground_truth: Sequence[TerritoryLabel]) -> float:
    """Fraction of reports whose findings name the ground-truth territory; unparseable counts as wrong."""
    if len(reports) != len(ground_truth):
        raise ValueError("reports and ground truth differ in length")
    if not reports:
        raise ValueError("need at least one report")
    correct = 0
    for rep, gt in zip(reports, ground_truth):
        try:
            correct += parse_report_territory(rep) is TerritoryLabel(gt)
        except ValueError:
            pass
    return correct / len(reports)


# ---------------------------------------------------------------------------
# external model


@dataclass(frozen=True)
class EndpointConfig:
    url: str
    model: str = "llama3-8b-instruct-lora"
    token_env: Optional[str] = "PIRTA_LLM_TOKEN"
    timeout: float = 60.0
    max_attempts: int = 3
    backoff: float = 1.0
    max_tokens: int = 512
    temperature: float = 0.0


def _completion_text(payload) -> str:
    if isinstance(payload, dict):
        if isinstance(payload.get("text"), str):
            return payload["text"]
        choices = payload.get("choices")
        if choices and isinstance(choices[0], dict):
            c = choices[0]
            if isinstance(c.get("text"), str):
                return c["text"]
            msg = c.get("message")
            if isinstance(msg, dict) and isinstance(msg.get("content"), str):
                return msg["content"]
    raise ReportParseError("endpoint response carries no completion text", json.dumps(payload))


def llm_generate(prompt: PromptInstance, endpoint: EndpointConfig, client=None) -> RadiologyReport:
    """POST the prompt to a text-completion endpoint and parse the reply.

    Transport errors and timeouts are retried ``max_attempts`` times, then raise
    :class:`LLMUnavailable`. Unparseable output raises :class:`ReportParseError`
    immediately. The retrieved findings are appended when the model omits them.
    """
    headers = {"Content-Type": "application/json"}
    token = os.environ.get(endpoint.token_env) if endpoint.token_env else None
    if token:
        headers["Authorization"] = f"Bearer {token}"
    body = {"model": endpoint.model, "prompt": prompt.instruction_text,
            "max_tokens": endpoint.max_tokens, "temperature": endpoint.temperature}
    own_client = client is None
    client = client or httpx.Client(timeout=endpoint.timeout)
    try:
        last_exc: Optional[Exception] = None
        for attempt in range(endpoint.max_attempts):
            try:
                resp = client.post(endpoint.url, json=body, headers=headers, timeout=endpoint.timeout)
            except (httpx.TransportError, httpx.TimeoutException) as exc:
                last_exc = exc
            else:
                if resp.status_code >= 500 or resp.status_code == 429:
                    last_exc = RuntimeError(f"HTTP {resp.status_code}")
                else:
                    resp.raise_for_status()
                    try:
                        payload = resp.json()
                    except ValueError:
                        payload = {"text": resp.text}
                    break
            if attempt + 1 < endpoint.max_attempts and endpoint.backoff:
                time.sleep(endpoint.backoff * 2 ** attempt)
        else:
            raise LLMUnavailable(
                f"completion endpoint failed after {endpoint.max_attempts} attempt(s): {last_exc}") from last_exc
    finally:
        if own_client:
            client.close()

    report = parse_report(_completion_text(payload))
    if not report.similar_reports:
        report = RadiologyReport(
            report.clinical_presentation, report.nihss, report.past_medical_history, report.findings,
            report.impression, tuple((i, s, t) for i, (t, s) in enumerate(prompt.retrieved, 1)))
    return report


# ---------------------------------------------------------------------------
# files


def write_reports(reports: Iterable[tuple[str, RadiologyReport]], jsonl_path: str | Path,
                  text_dir: Optional[str | Path] = None) -> None:
    jsonl_path = Path(jsonl_path)
    jsonl_path.parent.mkdir(parents=True, exist_ok=True)
    if text_dir is not None:
        Path(text_dir).mkdir(parents=True, exist_ok=True)
    with jsonl_path.open("w") as fh:
        for rid, rep in reports:
            fh.write(json.dumps({"id": rid, **rep.to_dict()}) + "\n")
            if text_dir is not None:
                (Path(text_dir) / f"{rid}.txt").write_text(rep.to_text())


def read_reports(jsonl_path: str | Path) -> list[tuple[str, RadiologyReport]]:
    out = []
    for line in Path(jsonl_path).read_text().splitlines():
        if line.strip():
            d = json.loads(line)
            out.append((d.pop("id"), RadiologyReport.from_dict(d)))
    return out
