"""Logger factory and context helpers for structured logging"""

import logging

# Context keys rendered as [key=value] tags, in this order
CONTEXT_KEYS = ("run", "stage", "seed", "iteration", "scene_id", "theta")


class ComponentLoggerAdapter(logging.LoggerAdapter):
    """Prefixes messages with the component name and known context tags"""

    def __init__(self, logger: logging.Logger, component: str):
        super().__init__(logger, {"component": component})
        self.component = component

    def process(self, msg, kwargs):
        # Format: [COMPONENT] [CONTEXT] message
        extra = kwargs.get("extra", {})
        context_parts = []
        for key in CONTEXT_KEYS:
            if key in extra:
                value = extra[key]
                if isinstance(value, float):
                    value = f"{value:g}"
                context_parts.append(f"[{key}={value}]")

        formatted_msg = f"[{self.component}]"
        if context_parts:
            formatted_msg += " " + " ".join(context_parts)
        formatted_msg += f" {msg}"

        return formatted_msg, kwargs


def get_logger(component: str) -> ComponentLoggerAdapter:
    """
    Get a logger with the component name automatically included in messages

    Args:
        component: Component name to include in log messages (e.g., "Scene", "SSOD")

    Returns:
        Logger adapter configured with the component name
    """
    return ComponentLoggerAdapter(logging.getLogger(component), component)
