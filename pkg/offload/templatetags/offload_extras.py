from django import template

register = template.Library()


@register.filter
def get_item(dictionary, key):
    """
    Template filter to access dictionary values by key.
    Usage: {{ row|get_item:"storage_mb" }}
    """
    return dictionary.get(key, None)


@register.filter
def percent(value, digits=1):
    """Render a fraction in [0, 1] as a percentage."""
    if value is None:
        return ''
    return f"{100.0 * float(value):.{int(digits)}f}%"
