import os
from dotenv import load_dotenv

load_dotenv()

# Output locations
OUTPUT_DIR = os.getenv('EVQ_OUTPUT_DIR', 'runs')
LOG_DIR = os.getenv('EVQ_LOG_DIR', 'logs')

# Reproducibility
SEED = int(os.getenv('EVQ_SEED', '0'))

# Calibration
CALIB_SAMPLES = int(os.getenv('EVQ_CALIB_SAMPLES', '32'))
CALIB_RESERVOIR = 256  # values kept per channel for scale search (每通道样本数)
PERCENTILE_GRID = [round(99.0 + 0.1 * i, 1) for i in range(11)]

# Quantization
DYADIC_MAX_BITS = int(os.getenv('EVQ_DYADIC_MAX_BITS', '16'))
DIVIDEND_BITS = int(os.getenv('EVQ_DIVIDEND_BITS', '16'))
LOG2_CLIP_LO = int(os.getenv('EVQ_LOG2_CLIP_LO', '-8'))
LOG2_CLIP_HI = int(os.getenv('EVQ_LOG2_CLIP_HI', '7'))
LOG2_ROUNDING = os.getenv('EVQ_LOG2_ROUNDING', 'nearest')  # nearest | lod
EPS_DIV = float(os.getenv('EVQ_EPS_DIV', '1e-6'))
D_HEAD = int(os.getenv('EVQ_D_HEAD', '16'))

# Accelerator geometry (8x8 + 8x8) x 16
ENGINE_N = int(os.getenv('EVQ_ENGINE_N', '8'))
ENGINE_M = int(os.getenv('EVQ_ENGINE_M', '8'))
ENGINE_T = int(os.getenv('EVQ_ENGINE_T', '8'))
ENGINE_S = int(os.getenv('EVQ_ENGINE_S', '8'))
ENGINE_L = int(os.getenv('EVQ_ENGINE_L', '16'))
CLOCK_MHZ = float(os.getenv('EVQ_CLOCK_MHZ', '200'))
DSP_PACK = int(os.getenv('EVQ_DSP_PACK', '2'))  # 8-bit mults per DSP (每个DSP的乘法数)
DRAM_BYTES_PER_CYCLE = float(os.getenv('EVQ_DRAM_BYTES_PER_CYCLE', 'inf'))
PHASE_SWITCH_OVERHEAD = int(os.getenv('EVQ_PHASE_SWITCH_OVERHEAD', '2'))  # stride-2 odd/even switch
REQUANT_DEPTH = int(os.getenv('EVQ_REQUANT_DEPTH', '4'))  # requant + log2 module pipeline depth
