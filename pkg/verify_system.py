#!/usr/bin/env python3
"""
Readiness Verification Script
crazylink testbed - dependency, output and scenario calibration check
"""

import os
import sys
import time
import importlib

class Colors:
    GREEN = '\033[92m'
    RED = '\033[91m'
    YELLOW = '\033[93m'
    BLUE = '\033[94m'
    BOLD = '\033[1m'
    RESET = '\033[0m'

def print_header(text):
    print(f"\n{Colors.BOLD}{Colors.BLUE}{'='*60}{Colors.RESET}")
    print(f"{Colors.BOLD}{Colors.BLUE}{text}{Colors.RESET}")
    print(f"{Colors.BOLD}{Colors.BLUE}{'='*60}{Colors.RESET}\n")

def print_success(text):
    print(f"{Colors.GREEN}✅ {text}{Colors.RESET}")

def print_error(text):
    print(f"{Colors.RED}❌ {text}{Colors.RESET}")

def print_warning(text):
    print(f"{Colors.YELLOW}⚠️  {text}{Colors.RESET}")

def print_info(text):
    print(f"{Colors.BLUE}ℹ️  {text}{Colors.RESET}")

# scenario file -> accepted median RTT band in ms
SCENARIO_BANDS = {
    'scenarios/a-radio.env': (3.5, 4.5),
    'scenarios/b-python.env': (16.0, 20.0),
    'scenarios/c-rust.env': (8.0, 10.0),
}

def check_dependencies():
    print_header("📦 DEPENDENCY CHECK")
    required = {
        'pydantic': 'pydantic',
        'dotenv': 'python-dotenv',
        'numpy': 'numpy',
        'serial': 'pyserial',
    }
    missing = []
    for mod, pkg in required.items():
        try:
            importlib.import_module(mod)
            print_success(f"{pkg} is installed")
        except ImportError:
            print_error(f"{pkg} is NOT installed")
            missing.append(pkg)

    if missing:
        return False, missing
    return True, []

def check_file_permissions():
    print_header("🔐 FILE PERMISSIONS CHECK")
    folder = os.getenv('CRAZYLINK_ARTIFACTS', 'artifacts')
    if not os.path.exists(folder):
        try:
            os.makedirs(folder)
            print_success(f"Created {folder}/")
        except Exception as e:
            print_error(f"Cannot create {folder}/: {e}")
            return False, [folder]

    test_file = os.path.join(folder, '.perm_test')
    try:
        with open(test_file, 'w') as f: f.write('ok')
        os.remove(test_file)
        print_success(f"{folder}/ is writable")
    except Exception as e:
        print_error(f"{folder}/ NOT writable: {e}")
        return False, [folder]
    return True, []

def check_environment_variables():
    print_header("🔑 ENVIRONMENT VARIABLES CHECK")
    level = os.environ.get('CRAZYLINK_LOG_LEVEL')
    if level:
        print_success(f"CRAZYLINK_LOG_LEVEL={level}")
    else:
        print_info("CRAZYLINK_LOG_LEVEL not set (INFO)")

    if os.environ.get('CRAZYLINK_LOG_FILE'):
        print_success(f"Logging to {os.environ['CRAZYLINK_LOG_FILE']}")
    else:
        print_warning("CRAZYLINK_LOG_FILE not set (console logging only)")

    return True, []

def check_scenarios():
    """
    Runs every bundled scenario on the virtual clock and checks its median RTT.
    """
    print_header("🧪 SCENARIO CALIBRATION")
    from harness import load_scenario, run_scenario
    from tracelab import read_packet_log, rtt
    import numpy as np

    folder = os.getenv('CRAZYLINK_ARTIFACTS', 'artifacts')
    failures = []
    for path, (low, high) in SCENARIO_BANDS.items():
        try:
            cfg = load_scenario(path)
            started = time.time()
            out = run_scenario(cfg, os.path.join(folder, 'verify', cfg.name))
            elapsed = time.time() - started
            samples = rtt(read_packet_log(out / 'packet_log.csv'))
            median = float(np.median(samples)) / 1000 if samples else float('nan')
        except Exception as e:
            print_error(f"{path}: {e}")
            failures.append(path)
            continue

        if low <= median <= high:
            print_success(f"{cfg.name}: median RTT {median:.2f} ms in [{low}, {high}] ({elapsed:.1f} s)")
        else:
            print_error(f"{cfg.name}: median RTT {median:.2f} ms outside [{low}, {high}]")
            failures.append(path)
        if elapsed > 10:
            print_warning(f"{cfg.name}: took {elapsed:.1f} s of wall time")

    return len(failures) == 0, failures

def main():
    print(f"\n{Colors.BOLD}🔍 crazylink System Verification{Colors.RESET}\n")

    deps_ok, _ = check_dependencies()
    if not deps_ok: return 1

    perms_ok, _ = check_file_permissions()
    if not perms_ok: return 1

    check_environment_variables()

    scenarios_ok, _ = check_scenarios()

    # Final Report
    print_header("📊 FINAL RESULT")
    if deps_ok and perms_ok and scenarios_ok:
        print(f"{Colors.GREEN}{Colors.BOLD}🎉 ALL SYSTEMS GO! SCENARIOS REPRODUCE THEIR BANDS.{Colors.RESET}\n")
        return 0
    print(f"{Colors.RED}{Colors.BOLD}❌ SYSTEM NOT READY. FIX ERRORS ABOVE.{Colors.RESET}\n")
    return 1

if __name__ == '__main__':
    sys.exit(main())
