# App Engine entry point (gunicorn main:app) and command line (python main.py <experiment> ...)
from backend.app.commands.cli import cli


def __getattr__(name):
    # gunicorn resolves main:app through getattr; the CLI never builds the Flask app
    if name == "app":
        from backend.wsgi import app

        return app
    raise AttributeError(f"module {__name__!r} has no attribute {name!r}")


if __name__ == "__main__":
    cli()
