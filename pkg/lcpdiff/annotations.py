from typing import TypeAlias

hex_str: TypeAlias = str

token_id: TypeAlias = int
token_index: TypeAlias = int
timestep: TypeAlias = int
seed: TypeAlias = int
