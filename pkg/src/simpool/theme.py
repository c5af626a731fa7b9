# src/simpool/theme.py
"""
simpool figure theme
Centralized colors and style constants for consistent plots.
"""

# ---------------------------------------------------------------------
# Provider colors (cores-in-use traces, stacked areas)
# ---------------------------------------------------------------------
PROVIDER_COLORS = {
    "grid": "#1976D2",   # Deep Blue
    "hpc": "#E53935",    # Red
    "nersc": "#FB8C00",  # Amber
}

# Fallback cycle for providers without a fixed color
PROVIDER_CYCLE = ["#1976D2", "#E53935", "#08701B", "#FB8C00", "#6A1B9A", "#00838F"]

# ---------------------------------------------------------------------
# Accent colors
# ---------------------------------------------------------------------
ACCENT_GREEN = "#4CAF50"  # running jobs
ACCENT_GRAY = "#9E9E9E"   # idle jobs / neutral
DUTY_COLOR = "#111827"    # collector duty cycle
SATURATION_COLOR = "#E53935"

# ---------------------------------------------------------------------
# Typography and base style
# ---------------------------------------------------------------------
BASE_FONT = {
    "family": "Inter, system-ui, sans-serif",
    "size": 13,
    "color": "#1e293b",
}

GRID_COLOR = "#e5e7eb"


# ---------------------------------------------------------------------
# Utility function for retrieving provider color
# ---------------------------------------------------------------------
def get_provider_color(provider: str, index: int = 0) -> str:
    """Return consistent color for a given provider (case-insensitive)."""
    for key, val in PROVIDER_COLORS.items():
        if key.lower() == provider.lower():
            return val
    return PROVIDER_CYCLE[index % len(PROVIDER_CYCLE)]
