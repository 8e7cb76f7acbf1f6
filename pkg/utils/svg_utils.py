"""Single-file SVG line charts built with lxml."""
from typing import Dict, List, Sequence, Tuple

from lxml import etree

SVG_NAMESPACE = 'http://www.w3.org/2000/svg'
WIDTH, HEIGHT = 640, 420
MARGIN_LEFT, MARGIN_RIGHT, MARGIN_TOP, MARGIN_BOTTOM = 70, 160, 40, 60
PALETTE = ['#1f77b4', '#d62728', '#2ca02c', '#9467bd', '#ff7f0e', '#8c564b']

Series = Dict[str, Sequence[Tuple[float, float]]]


def _ticks(low: float, high: float, count: int = 5) -> List[float]:
    if high == low:
        return [low]
    return [low + (high - low) * n / (count - 1) for n in range(count)]


def _bounds(values: List[float]) -> Tuple[float, float]:
    low, high = min(values), max(values)
    if low == high:
        return low - 1.0, high + 1.0
    return low, high


def _element(parent, tag: str, text: str = None, **attributes):
    element = etree.SubElement(parent, f'{{{SVG_NAMESPACE}}}{tag}')
    for key, value in attributes.items():
        element.set(key.replace('_', '-'), str(value))
    if text is not None:
        element.text = text
    return element


def line_chart(series: Series, x_label: str, y_label: str, title: str) -> bytes:
    """Polylines of ``series`` (name -> [(x, y), ...]) with axes, ticks and a legend."""
    points = [point for values in series.values() for point in values]
    if not points:
        raise ValueError('line chart needs at least one point')
    x_low, x_high = _bounds([x for x, _ in points])
    y_low, y_high = _bounds([y for _, y in points])
    plot_width = WIDTH - MARGIN_LEFT - MARGIN_RIGHT
    plot_height = HEIGHT - MARGIN_TOP - MARGIN_BOTTOM

    def to_x(x: float) -> float:
        return MARGIN_LEFT + (x - x_low) / (x_high - x_low) * plot_width

    def to_y(y: float) -> float:
        return MARGIN_TOP + (1.0 - (y - y_low) / (y_high - y_low)) * plot_height

    root = etree.Element(f'{{{SVG_NAMESPACE}}}svg', nsmap={None: SVG_NAMESPACE})
    root.set('width', str(WIDTH))
    root.set('height', str(HEIGHT))
    root.set('viewBox', f'0 0 {WIDTH} {HEIGHT}')
    _element(root, 'rect', x=0, y=0, width=WIDTH, height=HEIGHT, fill='white')
    _element(root, 'text', title, x=WIDTH // 2, y=24, text_anchor='middle', font_size=16, font_family='sans-serif')

    axes = _element(root, 'g', stroke='black', stroke_width=1)
    _element(axes, 'line', x1=MARGIN_LEFT, y1=MARGIN_TOP + plot_height, x2=MARGIN_LEFT + plot_width, y2=MARGIN_TOP + plot_height)
    _element(axes, 'line', x1=MARGIN_LEFT, y1=MARGIN_TOP, x2=MARGIN_LEFT, y2=MARGIN_TOP + plot_height)

    labels = _element(root, 'g', font_size=11, font_family='sans-serif')
    for x in _ticks(x_low, x_high):
        _element(axes, 'line', x1=f'{to_x(x):.2f}', y1=MARGIN_TOP + plot_height, x2=f'{to_x(x):.2f}', y2=MARGIN_TOP + plot_height + 5)
        _element(labels, 'text', f'{x:.3g}', x=f'{to_x(x):.2f}', y=MARGIN_TOP + plot_height + 18, text_anchor='middle')
    for y in _ticks(y_low, y_high):
        _element(axes, 'line', x1=MARGIN_LEFT - 5, y1=f'{to_y(y):.2f}', x2=MARGIN_LEFT, y2=f'{to_y(y):.2f}')
        _element(labels, 'text', f'{y:.4g}', x=MARGIN_LEFT - 8, y=f'{to_y(y) + 4:.2f}', text_anchor='end')
    _element(labels, 'text', x_label, x=MARGIN_LEFT + plot_width // 2, y=HEIGHT - 16, text_anchor='middle')
    _element(labels, 'text', y_label, x=18, y=MARGIN_TOP + plot_height // 2, text_anchor='middle',
             transform=f'rotate(-90 18 {MARGIN_TOP + plot_height // 2})')

    legend = _element(root, 'g', font_size=12, font_family='sans-serif')
    for n, (name, values) in enumerate(series.items()):
        color = PALETTE[n % len(PALETTE)]
        coordinates = ' '.join(f'{to_x(x):.2f},{to_y(y):.2f}' for x, y in sorted(values))
        _element(root, 'polyline', points=coordinates, fill='none', stroke=color, stroke_width=2)
        legend_y = MARGIN_TOP + 10 + 20 * n
        legend_x = MARGIN_LEFT + plot_width + 15
        _element(legend, 'line', x1=legend_x, y1=legend_y, x2=legend_x + 20, y2=legend_y, stroke=color, stroke_width=2)
        _element(legend, 'text', name, x=legend_x + 26, y=legend_y + 4)

    return etree.tostring(root, xml_declaration=True, encoding='utf-8', pretty_print=True)


def write_line_chart(path: str, series: Series, x_label: str, y_label: str, title: str) -> None:
    with open(path, 'wb') as svg_file:
        svg_file.write(line_chart(series, x_label, y_label, title))
