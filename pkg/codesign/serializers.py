from django.conf import settings
from rest_framework import serializers

MAX_SEED = 2 ** 64 - 1


class StrictSerializer(serializers.Serializer):
    """Rejects keys that are not declared fields."""

    def to_internal_value(self, data):
        if isinstance(data, dict):
            unknown = sorted(set(data) - set(self.fields))
            if unknown:
                raise serializers.ValidationError({key: ['Unknown field.'] for key in unknown})
        return super().to_internal_value(data)


class MatrixField(serializers.ListField):
    child = serializers.ListField(child=serializers.FloatField(), allow_empty=False)

    def __init__(self, **kwargs):
        kwargs.setdefault('allow_empty', False)
        super().__init__(**kwargs)

    def to_internal_value(self, data):
        rows = super().to_internal_value(data)
        if len({len(row) for row in rows}) != 1:
            raise serializers.ValidationError('Rows must all have the same length.')
        return rows


def check_shape(errors, name, matrix, rows, cols):
    if matrix is None:
        return
    shape = (len(matrix), len(matrix[0]))
    if shape != (rows, cols):
        errors[name] = [f'Expected a {rows}x{cols} matrix, got {shape[0]}x{shape[1]}.']


class ModelConfigSerializer(StrictSerializer):
    n = serializers.IntegerField(min_value=1)
    m = serializers.IntegerField(min_value=1)
    p = serializers.IntegerField(min_value=1)
    F = MatrixField()
    G = MatrixField()
    C = MatrixField()
    R1 = MatrixField()
    R2 = MatrixField()

    def validate(self, attrs):
        n, m, p = attrs['n'], attrs['m'], attrs['p']
        errors = {}
        check_shape(errors, 'F', attrs['F'], n, n)
        check_shape(errors, 'G', attrs['G'], n, m)
        check_shape(errors, 'C', attrs['C'], p, n)
        check_shape(errors, 'R1', attrs['R1'], n, n)
        check_shape(errors, 'R2', attrs['R2'], p, p)
        if errors:
            raise serializers.ValidationError(errors)
        return attrs


class DetectorConfigSerializer(StrictSerializer):
    false_alarm_rate = serializers.FloatField(default=0.05)
    alpha = serializers.FloatField(required=False)

    def validate_false_alarm_rate(self, value):
        if not 0.0 < value < 1.0:
            raise serializers.ValidationError('Must lie strictly between 0 and 1.')
        return value

    def validate_alpha(self, value):
        if value <= 0:
            raise serializers.ValidationError('Must be positive.')
        return value


class TruncationConfigSerializer(StrictSerializer):
    p_bar = serializers.FloatField(default=0.95)

    def validate_p_bar(self, value):
        if not 0.0 < value < 1.0:
            raise serializers.ValidationError('Must lie strictly between 0 and 1.')
        return value


class HorizonConfigSerializer(StrictSerializer):
    k = serializers.IntegerField(min_value=1, required=False)
    eps = serializers.FloatField(required=False)

    def validate(self, attrs):
        if 'k' in attrs and 'eps' in attrs:
            raise serializers.ValidationError('Give either a fixed horizon k or a settling tolerance eps, not both.')
        if 'eps' in attrs and attrs['eps'] <= 0:
            raise serializers.ValidationError({'eps': ['Must be positive.']})
        if 'k' not in attrs:
            attrs.setdefault('eps', settings.CODESIGN['HORIZON_EPS'])
        return attrs


class SolverConfigSerializer(StrictSerializer):
    starts = serializers.IntegerField(min_value=0, required=False)
    seed = serializers.IntegerField(min_value=0, max_value=MAX_SEED, required=False)
    residual_tol = serializers.FloatField(min_value=0, required=False)
    max_iterations = serializers.IntegerField(min_value=1, required=False)
    hessian_step = serializers.FloatField(min_value=0, required=False)
    hessian_tol = serializers.FloatField(min_value=0, required=False)
    gain_tol = serializers.FloatField(min_value=0, required=False)

    def validate(self, attrs):
        resolved = dict(settings.CODESIGN['SOLVER'])
        resolved.update(attrs)
        return resolved


class GainsConfigSerializer(StrictSerializer):
    L = MatrixField()
    K = MatrixField()


class OptionsConfigSerializer(StrictSerializer):
    gamma_bar = serializers.FloatField(required=False)
    gamma_from = serializers.FloatField(required=False)
    gamma_to = serializers.FloatField(required=False)
    steps = serializers.IntegerField(min_value=1, required=False)
    k = serializers.IntegerField(min_value=1, required=False)
    directions = serializers.IntegerField(min_value=1, required=False)
    trials = serializers.IntegerField(min_value=1, required=False)
    seed = serializers.IntegerField(min_value=0, max_value=MAX_SEED, required=False)


class RunConfigSerializer(StrictSerializer):
    model = ModelConfigSerializer()
    detector = DetectorConfigSerializer(required=False)
    truncation = TruncationConfigSerializer(required=False)
    horizon = HorizonConfigSerializer(required=False)
    solver = SolverConfigSerializer(required=False)
    gains = GainsConfigSerializer(required=False)
    options = OptionsConfigSerializer(required=False)

    def validate(self, attrs):
        model = attrs['model']
        attrs.setdefault('detector', {'false_alarm_rate': 0.05})
        attrs.setdefault('truncation', {'p_bar': 0.95})
        attrs.setdefault('horizon', {'eps': settings.CODESIGN['HORIZON_EPS']})
        attrs.setdefault('solver', dict(settings.CODESIGN['SOLVER']))
        attrs.setdefault('options', {})

        gains = attrs.get('gains')
        if gains:
            errors = {}
            check_shape(errors, 'L', gains['L'], model['n'], model['p'])
            check_shape(errors, 'K', gains['K'], model['m'], model['n'])
            if errors:
                raise serializers.ValidationError({'gains': errors})
        return attrs
