#!/usr/bin/env python3
"""
bdstate 命令行启动脚本
"""
import sys
from pathlib import Path

# 添加项目根目录到Python路径
sys.path.insert(0, str(Path(__file__).parent))

from bdstate.cli import main

if __name__ == '__main__':
    sys.exit(main())
