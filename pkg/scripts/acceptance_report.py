"""Run the acceptance tests and print only the PASS/FAIL lines.

    python scripts/acceptance_report.py          # everything (about 25 min on one core)
    python scripts/acceptance_report.py --fast   # skip the end-to-end training runs
"""

import subprocess
import sys


def main():
    cmd = [sys.executable, "-m", "pytest", "tests/test_acceptance.py", "-q", "-p", "no:cacheprovider"]
    if "--fast" in sys.argv:
        cmd += ["-m", "not slow"]
    proc = subprocess.run(cmd, capture_output=True, text=True)
    lines = [ln for ln in proc.stdout.splitlines() if ln.startswith(("PASS", "FAIL"))]
    # each line is printed twice: once by the test, once in the terminal summary
    for ln in dict.fromkeys(lines):
        print(ln)
    sys.exit(proc.returncode)


if __name__ == "__main__":
    main()
