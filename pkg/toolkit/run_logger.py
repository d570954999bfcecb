import datetime
import logging
import os
from typing import Dict, Optional

import aiohttp
import requests

from utils import CircuitBreaker, ToolkitError, error_handler, sync_error_handler

logger = logging.getLogger(__name__)

COLOR_STARTED = 0x0099FF
COLOR_FINISHED = 0x00FF00
COLOR_GATE = 0xFFCC00
COLOR_ERROR = 0xFF6600


class RunLogger:
    """Sends run notifications to an optional webhook"""

    def __init__(self, webhook_url: Optional[str] = None, timeout: float = 5.0):
        self.webhook_url = webhook_url or os.getenv("NOTIFY_WEBHOOK_URL")
        self.timeout = timeout
        self.breaker = CircuitBreaker(failure_threshold=3, recovery_timeout=300.0)
        self.sent = 0

        if not self.webhook_url:
            logger.debug("NOTIFY_WEBHOOK_URL not set, run notifications disabled")

    @staticmethod
    def _embed(title: str, color: int, fields: Dict[str, object] = None,
               description: str = None) -> Dict:
        embed = {
            "title": title,
            "color": color,
            "timestamp": datetime.datetime.now().isoformat(),
        }
        if description:
            embed["description"] = description
        if fields:
            embed["fields"] = [
                {"name": name, "value": str(value), "inline": True}
                for name, value in fields.items()
            ]
        return {"embeds": [embed]}

    @sync_error_handler
    def run_started(self, command: str, seed: int) -> None:
        self._send(self._embed(f"Run started: {command}", COLOR_STARTED, {"Seed": seed}))

    @sync_error_handler
    def run_finished(self, command: str, summary: Dict[str, object], seconds: float) -> None:
        fields = {key: _short(value) for key, value in summary.items()}
        fields["Wall time (s)"] = f"{seconds:.1f}"
        self._send(self._embed(f"Run finished: {command}", COLOR_FINISHED, fields))

    @sync_error_handler
    def gate_failed(self, command: str, final_map: float, gate: float) -> None:
        self._send(self._embed(
            f"Gate failed: {command}", COLOR_GATE,
            {"mAP@0.5": f"{final_map:.4f}", "Required": f"{gate:.4f}"},
        ))

    @sync_error_handler
    def log_error(self, command: str, error_message: str) -> None:
        self._send(self._embed(f"Error in {command}", COLOR_ERROR, description=error_message))

    @error_handler
    async def async_progress(self, command: str, done: int, total: int) -> None:
        await self.async_send(self._embed(
            f"Progress: {command}", COLOR_STARTED, {"Done": done, "Total": total}
        ))

    def _post(self, data: Dict) -> None:
        response = requests.post(self.webhook_url, json=data, timeout=self.timeout)
        response.raise_for_status()

    def _send(self, data: Dict) -> bool:
        """Post synchronously; failures are logged, never raised"""
        title = data["embeds"][0]["title"]
        if not self.webhook_url:
            logger.info(f"[DEV] Would send notification: {title}")
            return False
        try:
            self.breaker.call(self._post, data)
        except requests.exceptions.RequestException as e:
            logger.info(f"Notification failed: {e}")
            return False
        except ToolkitError:
            logger.debug(f"Notification suppressed, circuit open: {title}")
            return False
        self.sent += 1
        logger.debug(f"Notification sent: {title}")
        return True

    async def async_send(self, data: Dict) -> bool:
        """Async variant of _send for use inside the experiment runner"""
        title = data["embeds"][0]["title"]
        if not self.webhook_url:
            logger.info(f"[DEV] Would send notification: {title}")
            return False
        if not self.breaker.allow():
            return False
        try:
            timeout = aiohttp.ClientTimeout(total=self.timeout)
            async with aiohttp.ClientSession(timeout=timeout) as session:
                async with session.post(self.webhook_url, json=data) as response:
                    response.raise_for_status()
        except Exception as e:
            self.breaker.record_failure()
            logger.info(f"Notification failed: {e}")
            return False
        self.breaker.reset()
        self.sent += 1
        return True


def _short(value: object) -> str:
    if isinstance(value, float):
        return f"{value:.4f}"
    return str(value)
