import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parent))

from attribution_utils.cli.GroundingCLI import main


if __name__ == "__main__":
    # e.g. python Run_Grounding.py --mock test/fixtures/mock_script.json evaluate responses.jsonl --manifest manifest.jsonl
    sys.exit(main())
