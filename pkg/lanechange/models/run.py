from lanechange import db
from datetime import datetime, timezone
import json


def _utcnow():
    return datetime.now(timezone.utc)


class PipelineRun(db.Model):
    """One invocation of a pipeline command"""
    id = db.Column(db.Integer, primary_key=True)
    command = db.Column(db.String(32), nullable=False, index=True)
    seed = db.Column(db.Integer, nullable=True)
    arguments = db.Column(db.Text, nullable=False, default='{}')  # JSON string
    status = db.Column(db.String(16), nullable=False, default='running')
    summary = db.Column(db.Text, nullable=True)  # JSON string
    output_path = db.Column(db.String(512), nullable=True)
    started_at = db.Column(db.DateTime, default=_utcnow, index=True)
    finished_at = db.Column(db.DateTime, nullable=True)

    def get_arguments(self):
        """Parse and return the recorded arguments"""
        try:
            return json.loads(self.arguments or '{}')
        except json.JSONDecodeError:
            return {}

    def set_arguments(self, arguments):
        """Store arguments as JSON string"""
        self.arguments = json.dumps(arguments, sort_keys=True, default=str)

    def get_summary(self):
        """Parse and return the run summary"""
        try:
            return json.loads(self.summary) if self.summary else {}
        except json.JSONDecodeError:
            return {}

    def set_summary(self, summary):
        """Store summary as JSON string"""
        self.summary = json.dumps(summary, sort_keys=True, default=str)

    def finish(self, status, summary=None):
        self.status = status
        if summary is not None:
            self.set_summary(summary)
        self.finished_at = _utcnow()

    def to_dict(self):
        """Convert run to dictionary for JSON serialization"""
        return {
            'id': self.id,
            'command': self.command,
            'seed': self.seed,
            'arguments': self.get_arguments(),
            'status': self.status,
            'summary': self.get_summary(),
            'output_path': self.output_path,
            'started_at': self.started_at.isoformat() if self.started_at else None,
            'finished_at': self.finished_at.isoformat() if self.finished_at else None,
        }

    def __repr__(self):
        return f'<PipelineRun {self.id}: {self.command} {self.status}>'
