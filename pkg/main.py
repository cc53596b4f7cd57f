#!/usr/bin/env python3
"""
HEML - Hierarchical Explainable Metric Learning
Trains segment models bottom-up and explains comparisons with metric trees
"""

import os
import sys

from dotenv import load_dotenv

# Load config before importing other modules
config_path = os.path.join(os.path.dirname(os.path.abspath(__file__)), 'config', 'config.env')
load_dotenv(config_path, override=False)

# Add repository root to Python path
sys.path.insert(0, os.path.dirname(os.path.abspath(__file__)))

from src.cli.commands import main

if __name__ == "__main__":
    sys.exit(main())
