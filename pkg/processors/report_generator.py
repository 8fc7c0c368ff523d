"""
Report generator for verification and benchmark runs
Creates markdown reports in outputs/ and short console summaries
"""

from dataclasses import dataclass
from datetime import datetime
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence

from streaming.latency import LatencyReport


@dataclass
class CheckResult:
    """Outcome of one verification check"""
    name: str
    invariant: str
    passed: bool
    detail: str = ""
    seconds: float = 0.0


class VerifyReportGenerator:
    """Generates verification and latency reports"""

    def __init__(self, output_dir: Path = Path("outputs")):
        self.output_dir = Path(output_dir)
        self.output_dir.mkdir(parents=True, exist_ok=True)

    def generate_report(self, results: Sequence[CheckResult],
                        latency: Optional[Sequence[LatencyReport]] = None,
                        when: Optional[datetime] = None) -> str:
        """Build and save the markdown report; returns its path"""
        when = when or datetime.now()
        content = self._build_report(results, latency or [], when)
        return self._save_report(content, when)

    def generate_summary_stats(self, results: Sequence[CheckResult]) -> Dict[str, Any]:
        """Quick summary statistics for console output"""
        failed = [r.name for r in results if not r.passed]
        return {
            "total": len(results),
            "passed": len(results) - len(failed),
            "failed": failed,
            "seconds": sum(r.seconds for r in results),
        }

    def _build_report(self, results: Sequence[CheckResult], latency: Sequence[LatencyReport],
                      when: datetime) -> str:
        stats = self.generate_summary_stats(results)
        verdict = "✅ All checks passed" if not stats["failed"] else f"❌ {len(stats['failed'])} check(s) failed"

        report = f"""# 🔬 Verification Report - {when.strftime('%B %d, %Y %H:%M')}

{verdict} ({stats['passed']}/{stats['total']} in {stats['seconds']:.1f} s)

---

## 📋 Invariants

| Check | Invariant | Result | Detail |
|---|---|---|---|
"""
        for r in results:
            flag = "✅ pass" if r.passed else "❌ fail"
            detail = r.detail.splitlines()[0] if r.detail else ""
            report += f"| `{r.name}` | {r.invariant} | {flag} | {detail} |\n"

        if latency:
            report += "\n## ⏱️ Latency\n\n"
            report += self.latency_table(latency)

        report += f"""
---

*Report generated on {when.strftime('%Y-%m-%d at %H:%M')}*
"""
        return report

    def latency_table(self, reports: Sequence[LatencyReport]) -> str:
        lines = ["| Mode | RTF | Latency (ms) | Params (M) | AM ms | LM ms | Vocoder ms |",
                 "|---|---|---|---|---|---|---|"]
        for rep in reports:
            lines.append(
                f"| {rep.mode} | {rep.rtf:.3f} | {rep.inference_ms:.2f}+{rep.chunk_wait_ms:g}+"
                f"{rep.lookahead_ms:g}={rep.total_ms:.2f} | {rep.params_m:.2f} | "
                f"{rep.stages.get('am', 0.0):.2f} | {rep.stages.get('lm', 0.0):.2f} | "
                f"{rep.stages.get('vocoder', 0.0):.2f} |")
        return "\n".join(lines) + "\n"

    def _save_report(self, content: str, when: datetime) -> str:
        """Save the report to a file"""
        filepath = self.output_dir / f"verify_{when.strftime('%Y-%m-%d_%H%M%S')}.md"
        filepath.write_text(content, encoding="utf-8")
        return str(filepath)


def format_check_lines(results: List[CheckResult]) -> List[str]:
    return [f"   {'✅' if r.passed else '❌'} {r.name}: {r.detail}" for r in results]
