"""Collects one line per acceptance criterion for the terminal summary."""

RESULTS: dict[int, str] = {}
DECLARED = {
    9: "criterion 9: DECLARED (real-data ELBO tables, CPU ratios, figures and MCMC comparisons are out of scope)",
}


def record(number: int, ok: bool, detail: str) -> None:
    line = f"criterion {number}: {'PASS' if ok else 'FAIL'} ({detail})"
    RESULTS[number] = line
    print(line)
