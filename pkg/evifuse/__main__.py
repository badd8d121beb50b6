from evifuse.cli import app

app(prog_name="evifuse")
