#!/usr/bin/env python3
"""
Fit Reports
===========

Renders a FitResult as a markdown table of estimates with 95% confidence
intervals, written as `estimate (lower, upper)`. Reference categories are
shown as fixed at 0. The markdown can be converted to a standalone HTML page.
"""

import logging
from pathlib import Path
from typing import Dict, List, Optional, Union

import markdown

from inference import FitResult

logger = logging.getLogger(__name__)

PARAMETER_LABELS = {
    "sigma": "σ",
    "radius": "r",
    "shape": "α",
    "rate": "ρ",
}


def format_estimate(value: float, ci: Optional[List[float]], digits: int = 2) -> str:
    if ci is None:
        return f"{value:.{digits}f}"
    return f"{value:.{digits}f} ({ci[0]:.{digits}f}, {ci[1]:.{digits}f})"


def _label(name: str) -> str:
    if name.startswith("beta_"):
        return f"β {name[len('beta_'):]}"
    if name.startswith("gamma_"):
        return f"γ {name[len('gamma_'):]}"
    base, _, state = name.partition("_")
    label = PARAMETER_LABELS.get(base, base)
    return f"{label} (state {state})" if state else label


def render_markdown(result: FitResult, title: str = "Local Gibbs model fit", digits: int = 2) -> str:
    """Markdown report: model summary, estimates table and derived quantities"""
    model = result.model
    reference = {f"beta_{model['layer_names'][i]}" for i in model["reference_indices"]}
    lines = [
        f"# {title}",
        "",
        f"- Kernel: **{model['kernel']}**, states: **{model['n_states']}**",
        f"- Maximum log-likelihood: **{result.loglik:.2f}**",
        f"- Monte Carlo sizes: n_c = {result.mc['n_c']}, n_z = {result.mc['n_z']}, n_r = {result.mc['n_r']}",
        f"- Starts: {len(result.starts)} (best: {result.convergence.get('best_start')}, "
        f"converged: {result.convergence.get('converged')})",
        "",
        "| Parameter | Estimate (95% CI) |",
        "|---|---|",
    ]
    for name, value in result.estimates.items():
        if name in reference:
            cell = "0 (reference)"
        else:
            cell = format_estimate(value, result.ci95.get(name), digits)
        lines.append(f"| {_label(name)} | {cell} |")

    utilisation = result.derived.get("utilisation")
    if utilisation:
        lines += ["", "## Habitat utilisation", "", "| Category | Utilisation (per km²) |", "|---|---|"]
        lines += [f"| {name} | {value:.4g} |" for name, value in utilisation.items()]

    movement = result.derived.get("movement") or []
    if movement:
        lines += ["", "## Movement", ""]
        for k, summary in enumerate(movement, start=1):
            details = ", ".join(f"{key.replace('_', ' ')} = {val:.4g} km" for key, val in summary.items())
            prefix = f"State {k}: " if len(movement) > 1 else ""
            lines.append(f"- {prefix}{details}")

    if result.working_se is None:
        lines += ["", "_Standard errors not computed._"]
    return "\n".join(lines) + "\n"


def render_html(markdown_content: str, title: str = "Local Gibbs model fit") -> str:
    body = markdown.markdown(markdown_content, extensions=["extra"])
    return f"""<!DOCTYPE html>
<html lang="en">
<head>
    <meta charset="UTF-8">
    <meta name="viewport" content="width=device-width, initial-scale=1.0">
    <title>{title}</title>
    <style>
        body {{
            font-family: -apple-system, BlinkMacSystemFont, 'Segoe UI', Roboto, sans-serif;
            max-width: 900px;
            margin: 0 auto;
            padding: 20px;
            line-height: 1.6;
            color: #333;
        }}
        h1, h2 {{
            color: #2c3e50;
        }}
        h2 {{
            border-bottom: 2px solid #3498db;
            padding-bottom: 10px;
            margin-top: 40px;
        }}
        table {{
            border-collapse: collapse;
            margin: 20px 0;
        }}
        th, td {{
            border: 1px solid #ddd;
            padding: 6px 14px;
            text-align: left;
        }}
        th {{
            background-color: #f8f9fa;
        }}
    </style>
</head>
<body>
{body}
</body>
</html>
"""


def write_report(result: FitResult, markdown_file: Union[str, Path],
                 html_file: Optional[Union[str, Path]] = None) -> Dict[str, Path]:
    """Write the markdown report, and the HTML page when html_file is given"""
    content = render_markdown(result)
    written = {"markdown": Path(markdown_file)}
    with open(markdown_file, "w", encoding="utf-8") as f:
        f.write(content)
    logger.info(f"📝 Markdown report saved: {markdown_file}")
    if html_file is not None:
        with open(html_file, "w", encoding="utf-8") as f:
            f.write(render_html(content))
        written["html"] = Path(html_file)
        logger.info(f"🌐 HTML report saved: {html_file}")
    return written
