"""Tasks, optimizers, configuration, persistence and subcommands."""
