import json
import logging
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional

import pandas as pd

from profiler import ResourceEstimate
from search import CandidateRecord

# Set up logging
log = logging.getLogger(__name__)

ENGINE_VERSION = "1.0.0"


class ReportError(ValueError):
    """A run report line could not be parsed"""


class TruncatedReportError(ReportError):
    """The report has no summary line (the run was interrupted)"""


@dataclass
class RunReport:
    """Configuration snapshot, every candidate record and the search result"""
    config: Dict[str, Any]
    records: List[CandidateRecord] = field(default_factory=list)
    K: Optional[int] = None
    C: Optional[int] = None
    resources: Optional[ResourceEstimate] = None
    total_wall_ms: int = 0
    engine_version: str = ENGINE_VERSION
    deterministic: bool = True

    def config_line(self) -> Dict[str, Any]:
        return {'type': 'config', 'engine_version': self.engine_version, 'config': self.config}

    def summary_line(self) -> Dict[str, Any]:
        return {
            'type': 'summary',
            'K': self.K,
            'C': self.C,
            'resources': self.resources.to_dict() if self.resources else None,
            'total_wall_ms': self.total_wall_ms,
            'candidates': len(self.records),
            'deterministic': self.deterministic,
        }

    def to_lines(self) -> List[str]:
        lines = [_dump(self.config_line())]
        for record in self.records:
            lines.append(_dump(candidate_line(record)))
        lines.append(_dump(self.summary_line()))
        return lines

    def candidates_table(self) -> pd.DataFrame:
        rows = []
        for record in self.records:
            rows.append({
                'phase': record.phase.value,
                'k': record.k,
                'c': record.c,
                'feasible': record.feasible,
                'accuracy': round(record.accuracy, 4),
                'ram': record.resources.ram_bytes if record.feasible else None,
                'flash': record.resources.flash_bytes if record.feasible else None,
                'mac': record.resources.mac_count if record.feasible else None,
                'memo': record.from_memo,
                'wall_ms': record.wall_ms,
            })
        return pd.DataFrame(rows)


def _dump(data: Dict[str, Any]) -> str:
    return json.dumps(data, sort_keys=True)


def candidate_line(record: CandidateRecord) -> Dict[str, Any]:
    line = record.to_dict()
    line['type'] = 'candidate'
    return line


def render_report(report: RunReport) -> str:
    return "\n".join(report.to_lines()) + "\n"


def parse_report(text: str) -> RunReport:
    """
    Parse a JSONL run report.

    Raises:
        ReportError: malformed or out-of-order lines
        TruncatedReportError: no summary line
    """
    report = None
    summary = None
    for number, raw in enumerate(text.splitlines(), start=1):
        if not raw.strip():
            continue
        try:
            line = json.loads(raw)
        except json.JSONDecodeError as e:
            raise ReportError(f"Line {number} is not valid JSON: {e}") from e
        kind = line.get('type')
        if summary is not None:
            raise ReportError(f"Line {number} follows the summary line")
        if kind == 'config':
            if report is not None:
                raise ReportError(f"Second config line at {number}")
            report = RunReport(config=line.get('config', {}),
                               engine_version=line.get('engine_version', ENGINE_VERSION))
        elif kind == 'candidate':
            if report is None:
                raise ReportError(f"Candidate line {number} before the config line")
            try:
                report.records.append(CandidateRecord.from_dict(line))
            except (KeyError, ValueError, TypeError) as e:
                raise ReportError(f"Malformed candidate on line {number}: {e}") from e
        elif kind == 'summary':
            if report is None:
                raise ReportError(f"Summary line {number} before the config line")
            summary = line
        else:
            raise ReportError(f"Unknown line type {kind!r} on line {number}")

    if report is None:
        raise TruncatedReportError("Report is empty")
    if summary is None:
        raise TruncatedReportError(f"Report ends after {len(report.records)} candidates without a summary")
    if summary.get('candidates') != len(report.records):
        raise ReportError(f"Summary counts {summary.get('candidates')} candidates, found {len(report.records)}")

    report.K = summary.get('K')
    report.C = summary.get('C')
    report.resources = ResourceEstimate.from_dict(summary['resources']) if summary.get('resources') else None
    report.total_wall_ms = int(summary.get('total_wall_ms', 0))
    report.deterministic = bool(summary.get('deterministic', True))
    return report


def read_report(path: str) -> RunReport:
    with open(path, 'r', encoding='utf-8') as f:
        return parse_report(f.read())


def audit_report(report: RunReport) -> List[str]:
    """Problems with the feasibility gate in a report; empty when the report is consistent"""
    problems = []
    for index, record in enumerate(report.records):
        if not record.feasible and record.accuracy > 0:
            problems.append(f"Record {index} (k={record.k}, c={record.c}) is infeasible but has accuracy "
                            f"{record.accuracy}")
    limits = report.config.get('search', {}).get('limits')
    if limits and report.resources is not None:
        if report.resources.ram_bytes > limits['ram_max'] or \
                report.resources.flash_bytes > limits['flash_max'] or \
                report.resources.mac_count > limits['mac_max']:
            problems.append(f"Result k={report.K}, c={report.C} exceeds the limits: {report.resources.describe()}")
    return problems


def summarize_report(report: RunReport) -> str:
    """Candidate table followed by the result, as printed by the report command"""
    lines = [f"Engine {report.engine_version}, {len(report.records)} candidates, "
             f"{report.total_wall_ms / 1000:.1f}s"]
    if report.records:
        lines.append(report.candidates_table().to_string(index=False))
    result = f"Result: k={report.K}, c={report.C}"
    if report.resources is not None:
        result += f" ({report.resources.describe()})"
    lines.append(result)
    trained = [record.accuracy for record in report.records if record.feasible]
    if trained:
        lines.append(f"Best candidate accuracy: {max(trained):.4f}")
    for problem in audit_report(report):
        lines.append(f"WARNING: {problem}")
    return "\n".join(lines)


class ReportWriter:
    """Writes a report line by line, flushing each line so an interrupted run leaves a usable log"""

    def __init__(self, path: str):
        self.path = path
        self._file = open(path, 'w', encoding='utf-8')

    def _write(self, data: Dict[str, Any]):
        self._file.write(_dump(data) + "\n")
        self._file.flush()

    def write_config(self, report: RunReport):
        self._write(report.config_line())

    def write_record(self, record: CandidateRecord):
        self._write(candidate_line(record))

    def write_summary(self, report: RunReport):
        self._write(report.summary_line())
        log.info(f"Report written to {self.path}")

    def close(self):
        if self._file and not self._file.closed:
            self._file.close()

    def __enter__(self):
        return self

    def __exit__(self, exc_type, exc, tb):
        self.close()
